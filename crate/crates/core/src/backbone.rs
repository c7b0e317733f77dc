//! The unified transformer.
//!
//! Tokens are embedded per modality (text lookup, linear patch projection,
//! plus a timestep embedding on noisy patches) and run through `N` pre-norm
//! decoder layers with SwiGLU feed-forwards and two-axis rotary attention.
//! The first `N − D` layers form the autoregressive stage: they run over text
//! and block content only, and their output at the token preceding each block
//! becomes that block's condition. At layer `N − D` every noisy row is
//! replaced by its embedded noisy latent plus its condition, and the last `D`
//! layers denoise under the hybrid mask. Linear heads map the final hidden
//! states to text logits and clean-latent predictions.
//!
//! Each decoder layer holds one parameter set per tower (text, clean image,
//! noisy image); in shared mode the three names resolve to a single set.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{RowGroup, Tape, Var};
use crate::config::{ModelConfig, Tower, TowerMode};
use crate::error::{shape_err, Error, Result};
use crate::layout::{Role, SequencePlan};
use crate::mask::{build_mask, AttentionMask, MaskMode};
use crate::math;
use crate::params::ParamStore;
use crate::rng::{normal, stream, Role as RngRole};
use crate::rope::RopeTable;
use crate::schedule::{noising, NoiseSchedule};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ffn_norm: usize,
    w_gate: usize,
    w_up: usize,
    w_down: usize,
}

#[derive(Debug, Clone)]
struct ModelIndex {
    text_embed: usize,
    /// `[clean, noise]`
    patch_embed: [usize; 2],
    time_w1: usize,
    time_b1: usize,
    time_w2: usize,
    time_b2: usize,
    /// Per layer, indexed by [`Tower`].
    layers: Vec<[LayerIds; 3]>,
    final_norm: [usize; 3],
    lm_head: usize,
    /// `[clean, noise]`
    latent_head: [usize; 2],
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    index: ModelIndex,
}

enum Init {
    Normal,
    Ones,
    Zeros,
}

fn image_slot(t: Tower) -> usize {
    match t {
        Tower::Noise => 1,
        _ => 0,
    }
}

impl Model {
    /// Fresh parameters: truncated normal (±2σ) weights, unit norm gains,
    /// zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let w = c.hidden_width;
        let mut params = ParamStore::new();
        let mut add = |name: &str, rows: usize, cols: usize, init: Init| -> usize {
            let id = params.len();
            let m = match init {
                Init::Ones => Matrix::filled(rows, cols, 1.0),
                Init::Zeros => Matrix::zeros(rows, cols),
                Init::Normal => {
                    let mut rng = stream(seed, 0, RngRole::Init, id as u64);
                    let data = (0..rows * cols)
                        .map(|_| loop {
                            let z = normal(&mut rng);
                            if math::abs(z) <= 2.0 {
                                break z * c.init_std;
                            }
                        })
                        .collect();
                    Matrix::from_vec(rows, cols, data).expect("init shape")
                }
            };
            params.push(name, m)
        };

        let text_embed = add("text_embed", c.text_vocab, w, Init::Normal);
        let patch_embed = match c.towers {
            TowerMode::Shared => {
                let id = add("patch_embed.image", c.latent_channels, w, Init::Normal);
                [id, id]
            }
            TowerMode::Separate => [
                add("patch_embed.clean", c.latent_channels, w, Init::Normal),
                add("patch_embed.noise", c.latent_channels, w, Init::Normal),
            ],
        };
        let time_w1 = add("time.w1", c.time_dim, w, Init::Normal);
        let time_b1 = add("time.b1", 1, w, Init::Zeros);
        let time_w2 = add("time.w2", w, w, Init::Normal);
        let time_b2 = add("time.b2", 1, w, Init::Zeros);

        let towers: &[(Tower, &str)] = match c.towers {
            TowerMode::Shared => &[(Tower::Text, "shared")],
            TowerMode::Separate => &[(Tower::Text, "text"), (Tower::Clean, "clean"), (Tower::Noise, "noise")],
        };
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let mut sets = Vec::new();
            for (_, tname) in towers {
                let p = |s: &str| format!("layers.{l}.{tname}.{s}");
                sets.push(LayerIds {
                    attn_norm: add(&p("attn_norm"), 1, w, Init::Ones),
                    wq: add(&p("wq"), w, w, Init::Normal),
                    wk: add(&p("wk"), w, w, Init::Normal),
                    wv: add(&p("wv"), w, w, Init::Normal),
                    wo: add(&p("wo"), w, w, Init::Normal),
                    ffn_norm: add(&p("ffn_norm"), 1, w, Init::Ones),
                    w_gate: add(&p("w_gate"), w, c.ffn_width, Init::Normal),
                    w_up: add(&p("w_up"), w, c.ffn_width, Init::Normal),
                    w_down: add(&p("w_down"), c.ffn_width, w, Init::Normal),
                });
            }
            layers.push(match c.towers {
                TowerMode::Shared => [sets[0]; 3],
                TowerMode::Separate => [sets[0], sets[1], sets[2]],
            });
        }
        let final_norm = match c.towers {
            TowerMode::Shared => {
                let id = add("final_norm.shared", 1, w, Init::Ones);
                [id; 3]
            }
            TowerMode::Separate => [
                add("final_norm.text", 1, w, Init::Ones),
                add("final_norm.clean", 1, w, Init::Ones),
                add("final_norm.noise", 1, w, Init::Ones),
            ],
        };
        let lm_head = add("lm_head", w, c.text_vocab, Init::Normal);
        let latent_head = match c.towers {
            TowerMode::Shared => {
                let id = add("latent_head.image", w, c.latent_channels, Init::Normal);
                [id, id]
            }
            TowerMode::Separate => [
                add("latent_head.clean", w, c.latent_channels, Init::Normal),
                add("latent_head.noise", w, c.latent_channels, Init::Normal),
            ],
        };
        let index = ModelIndex {
            text_embed,
            patch_embed,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            layers,
            final_norm,
            lm_head,
            latent_head,
        };
        Ok(Self { config, params, index })
    }

    /// Wraps an existing parameter table, checking it matches the config.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let skeleton = Model::new(config, 0)?;
        skeleton.params.check_compatible(&params)?;
        Ok(Self {
            config: skeleton.config,
            params,
            index: skeleton.index,
        })
    }

    /// Parameter ids owned exclusively by `tower` (empty in shared mode).
    pub fn tower_param_ids(&self, tower: Tower) -> Vec<usize> {
        if self.config.towers == TowerMode::Shared {
            return Vec::new();
        }
        let t = tower as usize;
        let mut ids: Vec<usize> = self
            .index
            .layers
            .iter()
            .flat_map(|sets| {
                let s = sets[t];
                [
                    s.attn_norm,
                    s.wq,
                    s.wk,
                    s.wv,
                    s.wo,
                    s.ffn_norm,
                    s.w_gate,
                    s.w_up,
                    s.w_down,
                ]
            })
            .collect();
        ids.push(self.index.final_norm[t]);
        match tower {
            Tower::Text => ids.extend([self.index.text_embed, self.index.lm_head]),
            Tower::Clean => ids.extend([self.index.patch_embed[0], self.index.latent_head[0]]),
            Tower::Noise => ids.extend([
                self.index.patch_embed[1],
                self.index.latent_head[1],
                self.index.time_w1,
                self.index.time_b1,
                self.index.time_w2,
                self.index.time_b2,
            ]),
        }
        ids
    }
}

/// Lazily materialized tape variables for model parameters.
#[derive(Debug)]
pub struct ParamVars {
    vars: Vec<Option<Var>>,
}

impl ParamVars {
    pub fn new(model: &Model) -> Self {
        Self {
            vars: vec![None; model.params.len()],
        }
    }

    fn get(&mut self, tape: &mut Tape, model: &Model, id: usize) -> Var {
        *self.vars[id].get_or_insert_with(|| tape.param(id, model.params.get(id).clone()))
    }
}

/// Sinusoidal features of a timestep: `[sin(t·f_k)…, cos(t·f_k)…]`.
pub fn timestep_features(t: usize, dim: usize) -> Matrix {
    let half = dim / 2;
    let mut m = Matrix::zeros(1, dim);
    for k in 0..half {
        let f = math::powf(10_000.0, -(k as f64) / half as f64);
        let (s, c) = math::sin_cos(t as f64 * f);
        m.data[k] = s;
        m.data[half + k] = c;
    }
    m
}

/// Raw per-example inputs, already split into blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputs {
    /// Plain text ids (without delimiters).
    pub text_ids: Vec<usize>,
    /// Clean latent of every block, `tokens_per_block × channels`.
    pub content: Vec<Matrix>,
    /// Noisy latent fed to every noisy block.
    pub noisy: Vec<Matrix>,
    /// Diffusion timestep of every block.
    pub timesteps: Vec<usize>,
}

/// A teacher-forced training example: clean blocks plus the per-block noise
/// draw and timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub text_ids: Vec<usize>,
    pub clean: Vec<Matrix>,
    pub timesteps: Vec<usize>,
    pub eps: Vec<Matrix>,
}

impl Example {
    pub fn to_inputs(&self, schedule: &NoiseSchedule) -> Result<ModelInputs> {
        let noisy = self
            .clean
            .iter()
            .zip(&self.eps)
            .zip(&self.timesteps)
            .map(|((x0, eps), &t)| {
                let n = noising(&x0.data, t, &eps.data, schedule)?;
                Matrix::from_vec(x0.rows, x0.cols, n.x_t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelInputs {
            text_ids: self.text_ids.clone(),
            content: self.clean.clone(),
            noisy,
            timesteps: self.timesteps.clone(),
        })
    }
}

/// Embedded sequence ready for the decoder stack.
#[derive(Debug, Clone, Copy)]
pub struct Embedded {
    /// One row per plan token (`h_0`); noisy rows carry patch + timestep
    /// embeddings.
    pub h0: Var,
    /// Block content embedded for the autoregressive stage at the noisy
    /// slots, only when the plan has no clean prefix. Rows follow block order.
    pub ar_content: Option<Var>,
}

/// Graph outputs of one teacher-forced pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `(supervised text positions) × vocab`, absent when there is no text.
    pub text_logits: Option<Var>,
    /// Predicted clean latent per block.
    pub z_hat: Vec<Var>,
    /// Condition hidden state per block (absent when conditioning is off).
    pub cond_hidden: Vec<Var>,
    /// Condition read out into latent space, for the hidden loss.
    pub cond_latent: Vec<Var>,
    /// Clean-tower prediction per clean block.
    pub clean_out: Vec<Var>,
    /// Final hidden state of every plan token.
    pub h_final: Var,
}

/// Positions that carry a next-token target, with that target.
pub fn text_targets(plan: &SequencePlan, text_ids: &[usize], config: &ModelConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for k in plan.text_positions() {
        if k + 1 < plan.text_len {
            out.push((k, text_ids[k + 1]));
        } else if plan.ar_length > 0 {
            out.push((k, config.boi_id()));
        }
    }
    out
}

/// A text-only plan: `text_len` causal tokens, no delimiters, no blocks.
pub fn text_only_plan(text_len: usize) -> SequencePlan {
    SequencePlan::text_only(text_len)
}

struct Stage {
    groups: Vec<(Rc<Vec<usize>>, Tower)>,
    rope: RopeTable,
    mask: Rc<Vec<bool>>,
}

impl Model {
    fn stage(&self, plan_view: &SequencePlan, rows: &[usize], mask: Vec<bool>) -> Stage {
        let mut by_tower: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (local, &p) in rows.iter().enumerate() {
            let t = self.config.param_tower(Tower::of(plan_view.role(p)));
            by_tower[t as usize].push(local);
        }
        let groups = Tower::ALL
            .iter()
            .zip(by_tower)
            .filter(|(_, r)| !r.is_empty())
            .map(|(t, r)| (Rc::new(r), *t))
            .collect();
        let coords: Vec<_> = rows.iter().map(|&p| plan_view.coords()[p]).collect();
        Stage {
            groups,
            rope: RopeTable::new(&coords, self.config.head_dim(), self.config.rope_theta),
            mask: Rc::new(mask),
        }
    }

    fn groups(
        &self,
        tape: &mut Tape,
        pv: &mut ParamVars,
        stage: &Stage,
        pick: impl Fn(&LayerIds) -> usize,
        layer: usize,
    ) -> Vec<RowGroup> {
        stage
            .groups
            .iter()
            .map(|(rows, t)| {
                (
                    rows.clone(),
                    pv.get(tape, self, pick(&self.index.layers[layer][*t as usize])),
                )
            })
            .collect()
    }

    /// One pre-norm decoder layer. `prefix` holds rotated keys and values of
    /// earlier rows that the new rows may attend to; the returned matrices
    /// are the new rows' own keys and values.
    fn layer(
        &self,
        tape: &mut Tape,
        pv: &mut ParamVars,
        layer: usize,
        x: Var,
        stage: &Stage,
        prefix: Option<&(Matrix, Matrix)>,
    ) -> (Var, Var, Var) {
        let c = &self.config;
        let hd = c.head_dim();
        let g = self.groups(tape, pv, stage, |s| s.attn_norm, layer);
        let h = tape.grouped_rms_norm(x, g, c.rms_eps);
        let g = self.groups(tape, pv, stage, |s| s.wq, layer);
        let q = tape.grouped_matmul(h, g);
        let g = self.groups(tape, pv, stage, |s| s.wk, layer);
        let k = tape.grouped_matmul(h, g);
        let g = self.groups(tape, pv, stage, |s| s.wv, layer);
        let v = tape.grouped_matmul(h, g);
        let q = tape.rotate_pairs(q, stage.rope.cos.clone(), stage.rope.sin.clone(), hd);
        let k = tape.rotate_pairs(k, stage.rope.cos.clone(), stage.rope.sin.clone(), hd);
        let (k_all, v_all) = match prefix {
            Some((pk, pvv)) if pk.rows > 0 => {
                let ck = tape.constant(pk.clone());
                let cv = tape.constant(pvv.clone());
                (tape.concat_rows(vec![ck, k]), tape.concat_rows(vec![cv, v]))
            }
            _ => (k, v),
        };
        let scale = 1.0 / math::sqrt(hd as f64);
        let mut heads = Vec::with_capacity(c.n_heads);
        for head in 0..c.n_heads {
            let (qh, kh, vh) = if c.n_heads == 1 {
                (q, k_all, v_all)
            } else {
                (
                    tape.slice_cols(q, head * hd, hd),
                    tape.slice_cols(k_all, head * hd, hd),
                    tape.slice_cols(v_all, head * hd, hd),
                )
            };
            let s = tape.matmul_bt(qh, kh);
            let s = tape.scale(s, scale);
            let p = tape.masked_softmax(s, stage.mask.clone());
            heads.push(tape.matmul(p, vh));
        }
        let attn = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(heads)
        };
        let g = self.groups(tape, pv, stage, |s| s.wo, layer);
        let o = tape.grouped_matmul(attn, g);
        let x1 = tape.add(x, o);
        let g = self.groups(tape, pv, stage, |s| s.ffn_norm, layer);
        let h2 = tape.grouped_rms_norm(x1, g, c.rms_eps);
        let g = self.groups(tape, pv, stage, |s| s.w_gate, layer);
        let gate = tape.grouped_matmul(h2, g);
        let g = self.groups(tape, pv, stage, |s| s.w_up, layer);
        let up = tape.grouped_matmul(h2, g);
        let gate = tape.silu(gate);
        let m = tape.mul(gate, up);
        let g = self.groups(tape, pv, stage, |s| s.w_down, layer);
        let d = tape.grouped_matmul(m, g);
        (tape.add(x1, d), k, v)
    }

    /// Runs `layers` over `x`. Returns the output and, per layer, the new
    /// rows' keys and values.
    fn run_layers(
        &self,
        tape: &mut Tape,
        pv: &mut ParamVars,
        layers: core::ops::Range<usize>,
        mut x: Var,
        stage: &Stage,
        cache: Option<&KvCache>,
    ) -> (Var, Vec<(Var, Var)>) {
        let mut kv = Vec::with_capacity(layers.len());
        for l in layers {
            let prefix = cache.map(|c| &c.layers[l]);
            let (out, k, v) = self.layer(tape, pv, l, x, stage, prefix);
            kv.push((k, v));
            x = out;
        }
        (x, kv)
    }

    fn timestep_embedding(&self, tape: &mut Tape, pv: &mut ParamVars, t: usize) -> Var {
        let f = tape.constant(timestep_features(t, self.config.time_dim));
        let w1 = pv.get(tape, self, self.index.time_w1);
        let b1 = pv.get(tape, self, self.index.time_b1);
        let w2 = pv.get(tape, self, self.index.time_w2);
        let b2 = pv.get(tape, self, self.index.time_b2);
        let h = tape.matmul(f, w1);
        let h = tape.add_row(h, b1);
        let h = tape.silu(h);
        let h = tape.matmul(h, w2);
        tape.add_row(h, b2)
    }

    /// Patch projection of a block of latents, plus the timestep embedding
    /// when `timestep` is given.
    fn embed_block(
        &self,
        tape: &mut Tape,
        pv: &mut ParamVars,
        latent: &Matrix,
        tower: Tower,
        timestep: Option<usize>,
    ) -> Var {
        let x = tape.constant(latent.clone());
        let w = pv.get(tape, self, self.index.patch_embed[image_slot(tower)]);
        let e = tape.matmul(x, w);
        match timestep {
            Some(t) => {
                let te = self.timestep_embedding(tape, pv, t);
                tape.add_row(e, te)
            }
            None => e,
        }
    }

    fn embed_text(&self, tape: &mut Tape, pv: &mut ParamVars, ids: Vec<usize>) -> Var {
        let table = pv.get(tape, self, self.index.text_embed);
        tape.gather(table, ids)
    }

    fn check_inputs(&self, plan: &SequencePlan, inputs: &ModelInputs) -> Result<()> {
        let c = &self.config;
        let tpb = plan.tokens_per_block;
        if inputs.text_ids.len() != plan.text_len {
            return Err(shape_err("text ids", plan.text_len, inputs.text_ids.len()));
        }
        if let Some(&bad) = inputs.text_ids.iter().find(|&&id| id >= c.plain_vocab()) {
            return Err(shape_err("text id range", c.plain_vocab(), bad));
        }
        for (what, set) in [("content blocks", &inputs.content), ("noisy blocks", &inputs.noisy)] {
            if set.len() != plan.ar_length {
                return Err(shape_err(what, plan.ar_length, set.len()));
            }
            if let Some(m) = set.iter().find(|m| m.shape() != (tpb, c.latent_channels)) {
                return Err(shape_err(what, (tpb, c.latent_channels), m.shape()));
            }
        }
        if inputs.timesteps.len() != plan.ar_length {
            return Err(shape_err("timesteps", plan.ar_length, inputs.timesteps.len()));
        }
        Ok(())
    }

    /// Embeds every plan token: text ids through the embedding table, clean
    /// blocks through the clean patch projection, noisy blocks through the
    /// noise patch projection plus their timestep embedding.
    pub fn embed_inputs(
        &self,
        tape: &mut Tape,
        pv: &mut ParamVars,
        plan: &SequencePlan,
        inputs: &ModelInputs,
    ) -> Result<Embedded> {
        self.check_inputs(plan, inputs)?;
        let mut parts: Vec<(Var, Rc<Vec<usize>>)> = Vec::new();
        let mut text_rows = Vec::new();
        let mut ids = Vec::new();
        for (p, role) in plan.roles().iter().enumerate() {
            let id = match role {
                Role::Text => inputs.text_ids[p],
                Role::Boi => self.config.boi_id(),
                Role::Eoi => self.config.eoi_id(),
                _ => continue,
            };
            text_rows.push(p);
            ids.push(id);
        }
        if !text_rows.is_empty() {
            parts.push((self.embed_text(tape, pv, ids), Rc::new(text_rows)));
        }
        for i in 0..plan.ar_length {
            if let Some(range) = plan.clean_positions(i) {
                let e = self.embed_block(tape, pv, &inputs.content[i], Tower::Clean, None);
                parts.push((e, Rc::new(range.collect())));
            }
            let e = self.embed_block(tape, pv, &inputs.noisy[i], Tower::Noise, Some(inputs.timesteps[i]));
            parts.push((e, Rc::new(plan.noisy_positions(i).collect())));
        }
        let h0 = tape.assemble(plan.len(), parts);
        let ar_content = (!plan.clean_blocks && plan.ar_length > 0).then(|| {
            let blocks: Vec<Var> = inputs
                .content
                .iter()
                .map(|c| self.embed_block(tape, pv, c, Tower::Clean, None))
                .collect();
            tape.concat_rows(blocks)
        });
        Ok(Embedded { h0, ar_content })
    }

    /// Teacher-forced pass over a whole plan.
    pub fn forward_embedded(
        &self,
        tape: &mut Tape,
        pv: &mut ParamVars,
        plan: &SequencePlan,
        emb: Embedded,
    ) -> Result<ForwardVars> {
        let c = &self.config;
        let n = plan.len();
        let tpb = plan.tokens_per_block;
        let ar = c.ar_layers();
        let noisy: Vec<Vec<usize>> = (0..plan.ar_length).map(|i| plan.noisy_positions(i).collect()).collect();
        let is_noisy = |p: usize| matches!(plan.role(p), Role::NoisyBlock(_));

        // Autoregressive stage over text and block content.
        let ar_view = if plan.clean_blocks {
            plan.clone()
        } else {
            plan.content_view()
        };
        let ar_rows: Vec<usize> = if plan.clean_blocks {
            (0..n).filter(|&p| !is_noisy(p)).collect()
        } else {
            (0..n).collect()
        };
        let mut local = vec![usize::MAX; n];
        for (i, &p) in ar_rows.iter().enumerate() {
            local[p] = i;
        }
        let x_ar = match emb.ar_content {
            None => tape.select_rows(emb.h0, Rc::new(ar_rows.clone())),
            Some(content) => {
                let text_rows: Vec<usize> = (0..n).filter(|&p| !is_noisy(p)).collect();
                let t = tape.select_rows(emb.h0, Rc::new(text_rows.clone()));
                let slots: Vec<usize> = noisy.iter().flatten().copied().collect();
                tape.assemble(n, vec![(t, Rc::new(text_rows)), (content, Rc::new(slots))])
            }
        };
        let ar_mask = build_mask(&ar_view, MaskMode::Full);
        let stage = self.stage(&ar_view, &ar_rows, ar_mask.submatrix(&ar_rows, &ar_rows));
        let (h_ar, _) = self.run_layers(tape, pv, 0..ar, x_ar, &stage, None);

        // Conditions: hidden state of the token(s) right before each block.
        let mut cond_hidden = Vec::new();
        if c.conditions_active() {
            for i in 0..plan.ar_length {
                cond_hidden.push(if i == 0 {
                    let boi = tape.select_rows(h_ar, Rc::new(vec![local[plan.boi()]]));
                    tape.broadcast_rows(boi, tpb)
                } else {
                    let src: Vec<usize> = plan.content_block_positions(i - 1).map(|p| local[p]).collect();
                    tape.select_rows(h_ar, Rc::new(src))
                });
            }
        }

        // Diffusion stage input: context rows continue, noisy rows restart.
        let ctx_rows: Vec<usize> = (0..n).filter(|&p| !is_noisy(p)).collect();
        let mut parts = Vec::new();
        if !ctx_rows.is_empty() {
            let ctx_local: Vec<usize> = ctx_rows.iter().map(|&p| local[p]).collect();
            parts.push((tape.select_rows(h_ar, Rc::new(ctx_local)), Rc::new(ctx_rows)));
        }
        for (i, rows) in noisy.iter().enumerate() {
            let rows = Rc::new(rows.clone());
            let mut x = tape.select_rows(emb.h0, rows.clone());
            if let Some(&cond) = cond_hidden.get(i) {
                x = tape.add(x, cond);
            }
            parts.push((x, rows));
        }
        let x_d = tape.assemble(n, parts);
        let all: Vec<usize> = (0..n).collect();
        let mask = build_mask(plan, c.variant.mask_mode);
        let stage = self.stage(plan, &all, mask.as_slice().to_vec());
        let (h_final, _) = self.run_layers(tape, pv, ar..c.n_layers, x_d, &stage, None);

        // Heads.
        let text_logits = (plan.text_len > 0 && (plan.ar_length > 0 || plan.text_len > 1)).then(|| {
            let rows: Vec<usize> = if plan.ar_length > 0 {
                plan.text_positions().collect()
            } else {
                (0..plan.text_len - 1).collect()
            };
            let h = tape.select_rows(h_final, Rc::new(rows));
            self.text_head(tape, pv, h)
        });
        let mut z_hat = Vec::new();
        let mut clean_out = Vec::new();
        for (i, rows) in noisy.iter().enumerate() {
            let h = tape.select_rows(h_final, Rc::new(rows.clone()));
            z_hat.push(self.latent_head(tape, pv, h, Tower::Noise));
            if let Some(r) = plan.clean_positions(i) {
                let h = tape.select_rows(h_final, Rc::new(r.collect()));
                clean_out.push(self.latent_head(tape, pv, h, Tower::Clean));
            }
        }
        let cond_latent = cond_hidden
            .iter()
            .map(|&h| self.latent_head(tape, pv, h, Tower::Noise))
            .collect();
        Ok(ForwardVars {
            text_logits,
            z_hat,
            cond_hidden,
            cond_latent,
            clean_out,
            h_final,
        })
    }

    fn text_head(&self, tape: &mut Tape, pv: &mut ParamVars, h: Var) -> Var {
        let rows = tape.value(h).rows;
        let g = pv.get(tape, self, self.index.final_norm[Tower::Text as usize]);
        let h = tape.grouped_rms_norm(h, vec![(Rc::new((0..rows).collect()), g)], self.config.rms_eps);
        let w = pv.get(tape, self, self.index.lm_head);
        tape.matmul(h, w)
    }

    fn latent_head(&self, tape: &mut Tape, pv: &mut ParamVars, h: Var, tower: Tower) -> Var {
        let rows = tape.value(h).rows;
        let t = self.config.param_tower(tower);
        let g = pv.get(tape, self, self.index.final_norm[t as usize]);
        let h = tape.grouped_rms_norm(h, vec![(Rc::new((0..rows).collect()), g)], self.config.rms_eps);
        let w = pv.get(tape, self, self.index.latent_head[image_slot(tower)]);
        tape.matmul(h, w)
    }

    /// Embeds and runs a full teacher-forced pass.
    pub fn full_forward(
        &self,
        tape: &mut Tape,
        pv: &mut ParamVars,
        plan: &SequencePlan,
        inputs: &ModelInputs,
    ) -> Result<ForwardVars> {
        let emb = self.embed_inputs(tape, pv, plan, inputs)?;
        self.forward_embedded(tape, pv, plan, emb)
    }

    pub fn plan(&self, text_len: usize) -> Result<SequencePlan> {
        if text_len > self.config.max_text_len {
            return Err(shape_err("text length", self.config.max_text_len, text_len));
        }
        Ok(crate::layout::plan_sequence(
            &self.config.layout()?,
            text_len,
            self.config.variant.clean_blocks,
        ))
    }
}

/// Per-layer rotated keys and values of rows already processed.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub layers: Vec<(Matrix, Matrix)>,
}

impl KvCache {
    fn new(n_layers: usize, width: usize) -> Self {
        Self {
            layers: (0..n_layers)
                .map(|_| (Matrix::zeros(0, width), Matrix::zeros(0, width)))
                .collect(),
        }
    }

    fn append(&mut self, tape: &Tape, first_layer: usize, kv: &[(Var, Var)]) {
        for (i, &(k, v)) in kv.iter().enumerate() {
            let (ck, cv) = &mut self.layers[first_layer + i];
            append_rows(ck, tape.value(k));
            append_rows(cv, tape.value(v));
        }
    }

    fn truncate(&mut self, layers: core::ops::Range<usize>, rows: usize) {
        for l in layers {
            let (k, v) = &mut self.layers[l];
            k.data.truncate(rows * k.cols);
            k.rows = rows;
            v.data.truncate(rows * v.cols);
            v.rows = rows;
        }
    }
}

fn append_rows(dst: &mut Matrix, src: &Matrix) {
    debug_assert_eq!(dst.cols, src.cols);
    dst.data.extend_from_slice(&src.data);
    dst.rows += src.rows;
}

/// Incremental inference state: keys/values of the context rows (text,
/// delimiters and block content) processed so far, at every layer.
#[derive(Debug, Clone)]
pub struct ContextState {
    plan: SequencePlan,
    ar_view: SequencePlan,
    ar_mask: AttentionMask,
    diff_mask: AttentionMask,
    kv: KvCache,
    /// Plan positions cached in the autoregressive layers, in order.
    ar_rows: Vec<usize>,
    /// `h_{N−D}` of every cached autoregressive row.
    ar_hidden: Matrix,
    /// Plan positions cached in the diffusion layers.
    diff_rows: Vec<usize>,
}

impl ContextState {
    pub fn new(model: &Model, plan: &SequencePlan) -> Self {
        let ar_view = if plan.clean_blocks {
            plan.clone()
        } else {
            plan.content_view()
        };
        Self {
            plan: plan.clone(),
            ar_mask: build_mask(&ar_view, MaskMode::Full),
            ar_view,
            diff_mask: build_mask(plan, model.config.variant.mask_mode),
            kv: KvCache::new(model.config.n_layers, model.config.hidden_width),
            ar_rows: Vec::new(),
            ar_hidden: Matrix::zeros(0, model.config.hidden_width),
            diff_rows: Vec::new(),
        }
    }

    pub fn plan(&self) -> &SequencePlan {
        &self.plan
    }

    pub fn cached_rows(&self) -> &[usize] {
        &self.ar_rows
    }

    /// Drops every cached row at or after plan position `from`.
    pub fn truncate_from(&mut self, model: &Model, from: usize) {
        let keep_ar = self.ar_rows.iter().take_while(|&&p| p < from).count();
        let keep_diff = self.diff_rows.iter().take_while(|&&p| p < from).count();
        let ar = model.config.ar_layers();
        self.kv.truncate(0..ar, keep_ar);
        self.kv.truncate(ar..model.config.n_layers, keep_diff);
        self.ar_rows.truncate(keep_ar);
        self.diff_rows.truncate(keep_diff);
        self.ar_hidden.data.truncate(keep_ar * self.ar_hidden.cols);
        self.ar_hidden.rows = keep_ar;
    }

    /// `h_{N−D}` rows for the given plan positions (all must be cached).
    pub fn ar_hidden(&self, positions: &[usize]) -> Option<Matrix> {
        let idx: Option<Vec<usize>> = positions
            .iter()
            .map(|p| self.ar_rows.iter().position(|r| r == p))
            .collect();
        Some(self.ar_hidden.select_rows(&idx?))
    }
}

impl Model {
    /// Pushes new context rows through every layer they take part in,
    /// appending their keys and values to `state`. `rows` are plan positions
    /// following all cached ones; `text_ids` supplies ids for text rows and
    /// `content` the latent for block rows (one block at a time).
    pub fn extend_context(
        &self,
        state: &mut ContextState,
        rows: &[usize],
        text_ids: &[usize],
        content: Option<&Matrix>,
    ) -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        if state.ar_rows.last().is_some_and(|&l| rows[0] <= l) {
            return Err(Error::CacheInvalidation(format!(
                "rows must follow cached context (last {:?}, got {})",
                state.ar_rows.last(),
                rows[0]
            )));
        }
        let c = &self.config;
        let ar = c.ar_layers();
        let mut tape = Tape::new();
        let mut pv = ParamVars::new(self);

        let x = match state.ar_view.role(rows[0]) {
            Role::CleanBlock(_) => {
                let latent = content.ok_or_else(|| Error::CacheInvalidation("block rows need content".into()))?;
                if latent.shape() != (rows.len(), c.latent_channels) {
                    return Err(shape_err(
                        "context block",
                        (rows.len(), c.latent_channels),
                        latent.shape(),
                    ));
                }
                self.embed_block(&mut tape, &mut pv, latent, Tower::Clean, None)
            }
            _ => {
                let ids = rows
                    .iter()
                    .map(|&p| match state.ar_view.role(p) {
                        Role::Text => text_ids
                            .get(p)
                            .copied()
                            .ok_or_else(|| shape_err("prompt", p + 1, text_ids.len())),
                        Role::Boi => Ok(c.boi_id()),
                        Role::Eoi => Ok(c.eoi_id()),
                        _ => Err(Error::CacheInvalidation("mixed text and block rows".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                self.embed_text(&mut tape, &mut pv, ids)
            }
        };

        let mut keys = state.ar_rows.clone();
        keys.extend_from_slice(rows);
        let stage = self.stage(&state.ar_view, rows, state.ar_mask.submatrix(rows, &keys));
        let (h_ar, kv) = self.run_layers(&mut tape, &mut pv, 0..ar, x, &stage, Some(&state.kv));
        state.kv.append(&tape, 0, &kv);
        let h_ar_val = tape.value(h_ar).clone();
        state.ar_rows.extend_from_slice(rows);
        append_rows(&mut state.ar_hidden, &h_ar_val);

        // Rows that are real tokens of the denoising sequence keep going.
        let diff_local: Vec<usize> = rows
            .iter()
            .enumerate()
            .filter(|(_, &p)| !matches!(state.plan.role(p), Role::NoisyBlock(_)))
            .map(|(i, _)| i)
            .collect();
        if !diff_local.is_empty() && ar < c.n_layers {
            let drows: Vec<usize> = diff_local.iter().map(|&i| rows[i]).collect();
            let x = tape.select_rows(h_ar, Rc::new(diff_local));
            let mut keys = state.diff_rows.clone();
            keys.extend_from_slice(&drows);
            let stage = self.stage(&state.plan, &drows, state.diff_mask.submatrix(&drows, &keys));
            let (_, kv) = self.run_layers(&mut tape, &mut pv, ar..c.n_layers, x, &stage, Some(&state.kv));
            state.kv.append(&tape, ar, &kv);
            state.diff_rows.extend_from_slice(&drows);
        }
        Ok(())
    }

    /// One denoiser evaluation for `block` against the cached context:
    /// embeds `x_t` with timestep `t`, adds `cond`, runs the last `D` layers
    /// and returns the predicted clean latent.
    pub fn denoise_forward(
        &self,
        state: &ContextState,
        block: usize,
        x_t: &Matrix,
        t: usize,
        cond: Option<&Matrix>,
    ) -> Result<Matrix> {
        let c = &self.config;
        let rows: Vec<usize> = state.plan.noisy_positions(block).collect();
        if x_t.shape() != (rows.len(), c.latent_channels) {
            return Err(shape_err("denoise input", (rows.len(), c.latent_channels), x_t.shape()));
        }
        let mut tape = Tape::new();
        let mut pv = ParamVars::new(self);
        let mut x = self.embed_block(&mut tape, &mut pv, x_t, Tower::Noise, Some(t));
        if let Some(cond) = cond {
            if cond.shape() != (rows.len(), c.hidden_width) {
                return Err(shape_err("condition", (rows.len(), c.hidden_width), cond.shape()));
            }
            let cv = tape.constant(cond.clone());
            x = tape.add(x, cv);
        }
        let mut keys = state.diff_rows.clone();
        keys.extend_from_slice(&rows);
        let stage = self.stage(&state.plan, &rows, state.diff_mask.submatrix(&rows, &keys));
        let ar = c.ar_layers();
        let (h, _) = self.run_layers(&mut tape, &mut pv, ar..c.n_layers, x, &stage, Some(&state.kv));
        let out = self.latent_head(&mut tape, &mut pv, h, Tower::Noise);
        Ok(tape.value(out).clone())
    }

    /// Projects a condition hidden state into latent space (the hidden-loss
    /// readout).
    pub fn condition_readout(&self, cond: &Matrix) -> Matrix {
        let mut tape = Tape::new();
        let mut pv = ParamVars::new(self);
        let h = tape.constant(cond.clone());
        let out = self.latent_head(&mut tape, &mut pv, h, Tower::Noise);
        tape.value(out).clone()
    }
}

impl Model {
    /// Condition hidden state for `block` read from the cached context, or
    /// `None` when conditioning is off. The rows it needs (BOI for block 0,
    /// the previous block's content otherwise) must already be cached.
    pub fn condition_from_state(&self, state: &ContextState, block: usize) -> Result<Option<Matrix>> {
        if !self.config.conditions_active() {
            return Ok(None);
        }
        let plan = &state.plan;
        let tpb = plan.tokens_per_block;
        let missing = || Error::CacheInvalidation(format!("context for block {block} is not cached"));
        if block == 0 {
            let boi = state.ar_hidden(&[plan.boi()]).ok_or_else(missing)?;
            let rows = vec![0; tpb];
            Ok(Some(boi.select_rows(&rows)))
        } else {
            let src: Vec<usize> = plan.content_block_positions(block - 1).collect();
            state.ar_hidden(&src).ok_or_else(missing).map(Some)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::rng::normals;

    pub(crate) fn tiny(towers: TowerMode, variant: Variant) -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            diffusion_depth: 2,
            hidden_width: 8,
            n_heads: 2,
            ffn_width: 12,
            latent_channels: 2,
            text_vocab: 6,
            max_text_len: 2,
            grid_h: 2,
            grid_w: 2,
            ar_length: 2,
            towers,
            time_dim: 4,
            init_std: 0.3,
            variant,
            ..ModelConfig::default()
        }
    }

    fn random_inputs(model: &Model, plan: &SequencePlan, seed: u64) -> ModelInputs {
        let c = &model.config;
        let mut rng = stream(seed, 0, RngRole::Probe, 0);
        let block = |rng: &mut _| {
            Matrix::from_vec(
                plan.tokens_per_block,
                c.latent_channels,
                normals(rng, plan.tokens_per_block * c.latent_channels),
            )
            .unwrap()
        };
        ModelInputs {
            text_ids: (0..plan.text_len).map(|i| (i * 3 + 1) % c.plain_vocab()).collect(),
            content: (0..plan.ar_length).map(|_| block(&mut rng)).collect(),
            noisy: (0..plan.ar_length).map(|_| block(&mut rng)).collect(),
            timesteps: (0..plan.ar_length).map(|i| 100 + 350 * i).collect(),
        }
    }

    fn variants() -> Vec<Variant> {
        let mut out = Vec::new();
        for clean_blocks in [true, false] {
            for condition in [true, false] {
                for mask_mode in [MaskMode::Full, MaskMode::MlpAblation] {
                    out.push(Variant {
                        clean_blocks,
                        condition,
                        mask_mode,
                    });
                }
            }
        }
        out
    }

    #[test]
    fn parameter_counts_by_tower_mode() {
        let shared = Model::new(tiny(TowerMode::Shared, Variant::default()), 1).unwrap();
        let sep = Model::new(tiny(TowerMode::Separate, Variant::default()), 1).unwrap();
        let per_layer = 4 * 8 * 8 + 2 * 8 + 3 * 8 * 12;
        assert_eq!(
            sep.params.numel() - shared.params.numel(),
            3 * 2 * per_layer + 2 * 8 + 2 * 8 + 8 * 2
        );
        assert!(shared.tower_param_ids(Tower::Noise).is_empty());
        let noise = sep.tower_param_ids(Tower::Noise);
        let clean = sep.tower_param_ids(Tower::Clean);
        assert!(noise.iter().all(|id| !clean.contains(id)));
        assert!(sep.params.name(noise[0]).contains(".noise."));
    }

    #[test]
    fn init_is_seeded_and_truncated() {
        let c = tiny(TowerMode::Shared, Variant::default());
        let a = Model::new(c.clone(), 5).unwrap();
        let b = Model::new(c.clone(), 5).unwrap();
        let d = Model::new(c, 6).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_ne!(a.params.checksum(), d.params.checksum());
        for (name, m) in a.params.iter() {
            if name.ends_with("norm") || name.contains("final_norm") {
                assert!(m.data.iter().all(|&v| v == 1.0));
            } else if name.starts_with("time.b") {
                assert!(m.data.iter().all(|&v| v == 0.0));
            } else {
                assert!(m.data.iter().all(|v| v.abs() <= 0.6 + 1e-12), "{name}");
            }
        }
    }

    #[test]
    fn output_shapes() {
        for towers in [TowerMode::Shared, TowerMode::Separate] {
            for variant in variants() {
                let model = Model::new(tiny(towers, variant), 2).unwrap();
                let plan = model.plan(2).unwrap();
                let inputs = random_inputs(&model, &plan, 1);
                let mut tape = Tape::new();
                let mut pv = ParamVars::new(&model);
                let out = model.full_forward(&mut tape, &mut pv, &plan, &inputs).unwrap();
                assert_eq!(tape.value(out.text_logits.unwrap()).shape(), (2, 6));
                assert_eq!(out.z_hat.len(), 2);
                assert_eq!(tape.value(out.z_hat[1]).shape(), (2, 2));
                assert_eq!(out.clean_out.len(), if variant.clean_blocks { 2 } else { 0 });
                assert_eq!(out.cond_latent.len(), if variant.condition { 2 } else { 0 });
                assert!(tape.value(out.h_final).is_finite());
            }
        }
    }

    #[test]
    fn text_only_plan_runs() {
        let model = Model::new(tiny(TowerMode::Separate, Variant::default()), 2).unwrap();
        let plan = text_only_plan(2);
        let inputs = ModelInputs {
            text_ids: vec![1, 2],
            content: vec![],
            noisy: vec![],
            timesteps: vec![],
        };
        let mut tape = Tape::new();
        let mut pv = ParamVars::new(&model);
        let out = model.full_forward(&mut tape, &mut pv, &plan, &inputs).unwrap();
        assert_eq!(tape.value(out.text_logits.unwrap()).shape(), (1, 6));
        assert!(out.z_hat.is_empty());
        assert_eq!(text_targets(&plan, &inputs.text_ids, &model.config), vec![(0, 2)]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = Model::new(tiny(TowerMode::Shared, Variant::default()), 2).unwrap();
        let plan = model.plan(1).unwrap();
        let mut inputs = random_inputs(&model, &plan, 1);
        inputs.text_ids = vec![4];
        let mut tape = Tape::new();
        let mut pv = ParamVars::new(&model);
        assert!(model.full_forward(&mut tape, &mut pv, &plan, &inputs).is_err());
        assert!(model.plan(3).is_err());
    }

    /// Output rows change only when a visible input row is perturbed.
    #[test]
    fn network_respects_mask() {
        for variant in variants() {
            if variant.mask_mode == MaskMode::MlpAblation && variant.condition {
                continue;
            }
            let model = Model::new(tiny(TowerMode::Separate, variant), 3).unwrap();
            let plan = model.plan(1).unwrap();
            let inputs = random_inputs(&model, &plan, 2);
            let mask = build_mask(&plan, variant.mask_mode);
            let run = |k: Option<usize>| {
                let mut tape = Tape::new();
                let mut pv = ParamVars::new(&model);
                let emb = model.embed_inputs(&mut tape, &mut pv, &plan, &inputs).unwrap();
                let mut h0 = tape.value(emb.h0).clone();
                if let Some(k) = k {
                    for v in h0.row_mut(k) {
                        *v += 0.7;
                    }
                }
                let h0 = tape.input(h0);
                let emb = Embedded { h0, ..emb };
                let out = model.forward_embedded(&mut tape, &mut pv, &plan, emb).unwrap();
                tape.value(out.h_final).clone()
            };
            let base = run(None);
            for k in 0..plan.len() {
                let h = run(Some(k));
                for q in 0..plan.len() {
                    let moved = base.row(q).iter().zip(h.row(q)).any(|(a, b)| (a - b).abs() > 1e-12);
                    if !mask.allowed(q, k) {
                        assert!(!moved, "{variant:?}: q={q} moved by k={k}");
                    }
                    if q == k {
                        assert!(moved);
                    }
                }
            }
        }
    }

    #[test]
    fn cached_context_matches_full_forward() {
        for towers in [TowerMode::Shared, TowerMode::Separate] {
            for variant in variants() {
                let model = Model::new(tiny(towers, variant), 4).unwrap();
                let plan = model.plan(2).unwrap();
                let inputs = random_inputs(&model, &plan, 3);
                let mut tape = Tape::new();
                let mut pv = ParamVars::new(&model);
                let full = model.full_forward(&mut tape, &mut pv, &plan, &inputs).unwrap();

                let mut state = ContextState::new(&model, &plan);
                let prefix: Vec<usize> = (0..=plan.boi()).collect();
                model
                    .extend_context(&mut state, &prefix, &inputs.text_ids, None)
                    .unwrap();
                for i in 0..plan.ar_length {
                    if i > 0 {
                        let rows: Vec<usize> = plan.content_block_positions(i - 1).collect();
                        model
                            .extend_context(&mut state, &rows, &inputs.text_ids, Some(&inputs.content[i - 1]))
                            .unwrap();
                    }
                    let cond = model.condition_from_state(&state, i).unwrap();
                    if let Some(c) = &cond {
                        assert!(c.max_abs_diff(tape.value(full.cond_hidden[i])) < 1e-10);
                    }
                    let z = model
                        .denoise_forward(&state, i, &inputs.noisy[i], inputs.timesteps[i], cond.as_ref())
                        .unwrap();
                    let d = z.max_abs_diff(tape.value(full.z_hat[i]));
                    assert!(d < 1e-10, "{towers:?} {variant:?} block {i}: {d}");
                }
                // rows must arrive in order
                let err = model.extend_context(&mut state, &[0], &inputs.text_ids, None);
                assert!(matches!(err, Err(Error::CacheInvalidation(_))));
            }
        }
    }

    #[test]
    fn truncation_restores_earlier_state() {
        let model = Model::new(tiny(TowerMode::Separate, Variant::default()), 4).unwrap();
        let plan = model.plan(1).unwrap();
        let inputs = random_inputs(&model, &plan, 3);
        let mut state = ContextState::new(&model, &plan);
        model
            .extend_context(&mut state, &[0, 1], &inputs.text_ids, None)
            .unwrap();
        let snapshot = state.kv.clone();
        let rows: Vec<usize> = plan.content_block_positions(0).collect();
        model
            .extend_context(&mut state, &rows, &[0], Some(&inputs.content[0]))
            .unwrap();
        state.truncate_from(&model, rows[0]);
        assert_eq!(state.kv, snapshot);
        assert_eq!(state.cached_rows(), &[0, 1]);
    }

    fn weighted_sum(tape: &Tape, vars: &[Var], weights: &[Matrix]) -> f64 {
        vars.iter()
            .zip(weights)
            .map(|(&v, w)| tape.value(v).data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let variant = Variant::default();
        let mut model = Model::new(tiny(TowerMode::Separate, variant), 8).unwrap();
        let plan = model.plan(1).unwrap();
        let inputs = random_inputs(&model, &plan, 5);
        let mut rng = stream(9, 0, RngRole::Probe, 1);
        let eval = |model: &Model, rng_w: Option<&mut rand_chacha::ChaCha8Rng>| {
            let mut tape = Tape::new();
            let mut pv = ParamVars::new(model);
            let out = model.full_forward(&mut tape, &mut pv, &plan, &inputs).unwrap();
            let mut vars = out.z_hat.clone();
            vars.extend(out.clean_out.iter().copied());
            vars.extend(out.cond_latent.iter().copied());
            vars.push(out.text_logits.unwrap());
            (tape, vars, rng_w.is_some())
        };
        let (tape, vars, _) = eval(&model, None);
        let weights: Vec<Matrix> = vars
            .iter()
            .map(|&v| {
                let (r, c) = tape.value(v).shape();
                Matrix::from_vec(r, c, normals(&mut rng, r * c)).unwrap()
            })
            .collect();
        let seeds: Vec<(Var, Matrix)> = vars.iter().copied().zip(weights.iter().cloned()).collect();
        let grads = tape.param_grads(&tape.backward(&seeds));
        let h = 1e-6;
        for probe in [
            "layers.0.text.wq",
            "layers.1.clean.w_up",
            "layers.2.noise.wo",
            "time.w1",
            "latent_head.clean",
            "text_embed",
        ] {
            let id = model.params.id_of(probe).unwrap();
            let g = &grads.iter().find(|(i, _)| *i == id).unwrap().1;
            for e in [0, 5] {
                let orig = model.params.get(id).data[e];
                model.params.get_mut(id).data[e] = orig + h;
                let (t1, v1, _) = eval(&model, None);
                let up = weighted_sum(&t1, &v1, &weights);
                model.params.get_mut(id).data[e] = orig - h;
                let (t2, v2, _) = eval(&model, None);
                let down = weighted_sum(&t2, &v2, &weights);
                model.params.get_mut(id).data[e] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!(
                    (fd - g.data[e]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "{probe}[{e}]: {fd} vs {}",
                    g.data[e]
                );
            }
        }
    }

    #[test]
    fn towers_are_isolated() {
        let model = Model::new(tiny(TowerMode::Separate, Variant::default()), 8).unwrap();
        let plan = model.plan(2).unwrap();
        let inputs = random_inputs(&model, &plan, 5);
        let mut tape = Tape::new();
        let mut pv = ParamVars::new(&model);
        let out = model.full_forward(&mut tape, &mut pv, &plan, &inputs).unwrap();
        let touched = |seeds: Vec<(Var, Matrix)>| -> Vec<usize> {
            tape.param_grads(&tape.backward(&seeds))
                .into_iter()
                .filter(|(_, g)| g.data.iter().any(|&v| v != 0.0))
                .map(|(id, _)| id)
                .collect()
        };
        let ones = |v: Var| Matrix::filled(tape.value(v).rows, tape.value(v).cols, 1.0);
        let clean = touched(out.clean_out.iter().map(|&v| (v, ones(v))).collect());
        let noise_ids = model.tower_param_ids(Tower::Noise);
        assert!(clean.iter().all(|id| !noise_ids.contains(id)));
        let logits = out.text_logits.unwrap();
        let text = touched(vec![(logits, ones(logits))]);
        let clean_ids = model.tower_param_ids(Tower::Clean);
        assert!(text.iter().all(|id| !noise_ids.contains(id) && !clean_ids.contains(id)));
        let z: Vec<_> = out.z_hat.iter().map(|&v| (v, ones(v))).collect();
        assert!(touched(z).iter().any(|id| noise_ids.contains(id)));
    }
}
