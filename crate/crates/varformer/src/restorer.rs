//! Guided restoration network and the latent-space adapter.
//!
//! A three-level U-shaped network over degraded images where every level is
//! steered by externally computed multi-scale priors: per-level scale
//! weights re-weight the prior maps, a fusion net blends prior and image
//! features with complementary per-element weights, and a mediator-bottleneck
//! attention stage (linear in token count) injects the blend back into the
//! main path. Decoder levels mix their output with the matching encoder
//! feature through a learnable scalar gate.

use crate::error::{Result, VarError};
use crate::graph::Var;
use crate::nn::{Conv2d, LayerNorm, Linear, Mha, ParamStore, Session};
use crate::scalar::Scalar;
use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;

/// Mediator bottleneck geometry: `l_h·l_w` mediator tokens, attention width `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MediatorConfig {
    pub l_h: usize,
    pub l_w: usize,
    pub d: usize,
}

impl MediatorConfig {
    pub fn l(&self) -> usize {
        self.l_h * self.l_w
    }
}

impl Default for MediatorConfig {
    fn default() -> Self {
        MediatorConfig { l_h: 4, l_w: 4, d: 32 }
    }
}

/// Analytic multiply-accumulate count of one mediator attention pass over
/// `h` tokens of width `c`, `l` mediator tokens, attention width `d`.
/// Every term is linear in `h` except the mediator projection.
pub fn aft_flops(h: usize, l: usize, c: usize, d: usize) -> u64 {
    let (h, l, c, d) = (h as u64, l as u64, c as u64, d as u64);
    let proj_q = h * c * d;
    let proj_k = h * c * d;
    let proj_v = h * c * c;
    let proj_m = l * 2 * c * d;
    let scores_qm = h * l * d;
    let scores_mk = l * h * d;
    let agg_mk = l * h * c;
    let agg_qm = h * l * c;
    proj_q + proj_k + proj_v + proj_m + scores_qm + scores_mk + agg_mk + agg_qm
}

/// Which side of the U a level belongs to (separate fusion parameters).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Enc,
    Dec,
}

impl Side {
    fn tag(self) -> &'static str {
        match self {
            Side::Enc => "e",
            Side::Dec => "d",
        }
    }
}

/// Residual windowed self-attention over a `(C, H, W)` map: tokens attend
/// within non-overlapping `win×win` tiles (clamped to the map size).
struct WinBlock {
    ln: LayerNorm,
    attn: Mha,
}

impl WinBlock {
    fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        WinBlock {
            ln: LayerNorm::init(store, &format!("{name}/ln"), dim),
            attn: Mha::init(store, rng, &format!("{name}/attn"), dim, heads, false),
        }
    }

    fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var, win: usize) -> Var {
        let shape = s.g.shape(x).to_vec();
        let (h, w) = (shape[1], shape[2]);
        let wy = win.min(h);
        let wx = win.min(w);
        assert!(
            h % wy == 0 && w % wx == 0,
            "window {wy}x{wx} must tile the {h}x{w} map"
        );
        let mut bands = Vec::with_capacity(h / wy);
        for by in 0..h / wy {
            let band = s.g.slice_axis(x, 1, by * wy, (by + 1) * wy);
            let mut tiles = Vec::with_capacity(w / wx);
            for bx in 0..w / wx {
                let tile = s.g.slice_axis(band, 2, bx * wx, (bx + 1) * wx);
                let t = s.g.chw_to_tc(tile);
                let n = self.ln.forward(s, t);
                let a = self.attn.forward(s, n, n, None);
                let y = s.g.add(t, a);
                tiles.push(s.g.tc_to_chw(y, wy, wx));
            }
            bands.push(s.g.concat(&tiles, 2));
        }
        s.g.concat(&bands, 1)
    }
}

/// Window-attention trunk ending in a projection conv; used for both the
/// scale-weight predictor and the fusion-weight net. The final conv is
/// zero-initialized so the net starts at uniform outputs.
struct WeightNet {
    embed: Conv2d,
    blocks: Vec<WinBlock>,
    out: Conv2d,
}

const WEIGHT_NET_WIDTH: usize = 32;

impl WeightNet {
    fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let w = WEIGHT_NET_WIDTH;
        WeightNet {
            embed: Conv2d::init(store, rng, &format!("{name}/embed"), c_in, w, 1, 1, 0, true),
            blocks: (0..2)
                .map(|i| WinBlock::init(store, rng, &format!("{name}/blk{i}"), w, 2))
                .collect(),
            out: Conv2d::init_zero(store, &format!("{name}/out"), w, c_out, 1, 1, 0, true),
        }
    }

    fn forward<F: Scalar>(&self, s: &mut Session<F>, x: Var, win: usize) -> Var {
        let mut x = self.embed.forward(s, x);
        x = s.g.silu(x);
        for b in &self.blocks {
            x = b.forward(s, x, win);
        }
        self.out.forward(s, x)
    }
}

/// Window edge used by all weight nets.
pub const ATTN_WINDOW: usize = 8;

/// Restoration network shape and ablation switches.
#[derive(Debug, Clone)]
pub struct RestorerConfig {
    /// Channel widths per level, shallowest first.
    pub widths: [usize; 3],
    /// Channel widths of the guidance pyramid features per level.
    pub ev_channels: [usize; 3],
    /// Channel dimension of the prior scale maps.
    pub d_code: usize,
    /// Number of prior scales (K).
    pub k_scales: usize,
    pub mediator: MediatorConfig,
    /// Ablations: disable prior fusion, mediator attention, or mix-up skips.
    pub use_dae: bool,
    pub use_aft: bool,
    pub use_skip: bool,
}

impl Default for RestorerConfig {
    fn default() -> Self {
        RestorerConfig {
            widths: [32, 64, 128],
            ev_channels: crate::msvq::PYRAMID_CHANNELS,
            d_code: 32,
            k_scales: 5,
            mediator: MediatorConfig::default(),
            use_dae: true,
            use_aft: true,
            use_skip: true,
        }
    }
}

struct LevelGuides {
    wpred: WeightNet,
    m_proj: Conv2d,
    fuse_enc: WeightNet,
    fuse_dec: WeightNet,
}

/// Everything the restorer computed in one pass, exposed for inspection.
pub struct RestoreOut {
    pub image: Var,
    /// `(w1, w2)` complementary fusion maps, in application order.
    pub fusion: Vec<(Var, Var)>,
    /// Per-level scale weights, each a vector of K `[1]`-shaped scalars.
    pub scale_weights: Vec<Vec<Var>>,
}

/// The stage-2 parameter family ("restorer/…").
pub struct Restorer {
    pub cfg: RestorerConfig,
    in_conv: Conv2d,
    down: [Conv2d; 2],
    mid: [Conv2d; 2],
    up: [Conv2d; 2],
    out_conv: Conv2d,
    guides: Vec<LevelGuides>,
    aft_q: Vec<Linear>,
    aft_m: Vec<Linear>,
    aft_k: Vec<Linear>,
    aft_v: Vec<Linear>,
}

impl Restorer {
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: RestorerConfig,
    ) -> Self {
        let [c1, c2, c3] = cfg.widths;
        let in_conv = Conv2d::init(store, rng, "restorer/in", 3, c1, 3, 1, 1, true);
        let down = [
            Conv2d::init(store, rng, "restorer/down1", c1, c2, 3, 2, 1, true),
            Conv2d::init(store, rng, "restorer/down2", c2, c3, 3, 2, 1, true),
        ];
        let mid = [
            Conv2d::init(store, rng, "restorer/mid1", c3, c3, 3, 1, 1, true),
            Conv2d::init(store, rng, "restorer/mid2", c3, c3, 3, 1, 1, true),
        ];
        let up = [
            Conv2d::init(store, rng, "restorer/up2", c3, c2, 3, 1, 1, true),
            Conv2d::init(store, rng, "restorer/up1", c2, c1, 3, 1, 1, true),
        ];
        let out_conv = Conv2d::init(store, rng, "restorer/out", c1, 3, 3, 1, 1, true);

        let mut guides = Vec::with_capacity(3);
        let mut aft_q = Vec::with_capacity(3);
        let mut aft_m = Vec::with_capacity(3);
        let mut aft_k = Vec::with_capacity(3);
        let mut aft_v = Vec::with_capacity(3);
        for i in 0..3 {
            let c = cfg.widths[i];
            let lv = i + 1;
            guides.push(LevelGuides {
                wpred: WeightNet::init(
                    store,
                    rng,
                    &format!("restorer/wpred{lv}"),
                    cfg.ev_channels[i],
                    cfg.k_scales,
                ),
                m_proj: Conv2d::init(
                    store,
                    rng,
                    &format!("restorer/m{lv}"),
                    cfg.d_code,
                    c,
                    1,
                    1,
                    0,
                    false,
                ),
                fuse_enc: WeightNet::init(store, rng, &format!("restorer/fuse{lv}e"), 2 * c, 2 * c),
                fuse_dec: WeightNet::init(store, rng, &format!("restorer/fuse{lv}d"), 2 * c, 2 * c),
            });
            let d = cfg.mediator.d;
            aft_q.push(Linear::init(store, rng, &format!("restorer/aft{lv}/wq"), c, d, false));
            aft_m.push(Linear::init(store, rng, &format!("restorer/aft{lv}/wm"), 2 * c, d, false));
            aft_k.push(Linear::init(store, rng, &format!("restorer/aft{lv}/wk"), c, d, false));
            // zero value projection: the stage starts as a pure residual
            aft_v.push(Linear::init_zero(store, &format!("restorer/aft{lv}/wv"), c, c, false));
            store.insert(
                &format!("restorer/skip{lv}/theta"),
                ndarray::ArrayD::zeros(IxDyn(&[1])),
            );
        }

        Restorer {
            cfg,
            in_conv,
            down,
            mid,
            up,
            out_conv,
            guides,
            aft_q,
            aft_m,
            aft_k,
            aft_v,
        }
    }

    /// K softmax-normalized scale weights from the level-`level` guidance
    /// feature (1-based level). Returned as `[1]`-shaped scalar nodes.
    pub fn dae_scale_weights<F: Scalar>(
        &self,
        s: &mut Session<F>,
        f_ev: Var,
        level: usize,
    ) -> Result<Vec<Var>> {
        let g = &self.guides[level - 1];
        let shape = s.g.shape(f_ev).to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.ev_channels[level - 1] {
            return Err(VarError::shape(format!(
                "level {level} guidance feature has shape {shape:?}, want [{}, _, _]",
                self.cfg.ev_channels[level - 1]
            )));
        }
        if s.g.value(f_ev).iter().any(|v| !v.is_finite()) {
            return Err(VarError::domain("guidance feature must be finite"));
        }
        let logits_map = g.wpred.forward(s, f_ev, ATTN_WINDOW);
        let pooled = s.g.adaptive_avg_pool(logits_map, 1, 1);
        let row = s.g.reshape(pooled, &[1, self.cfg.k_scales]);
        let soft = s.g.softmax_rows(row);
        Ok((0..self.cfg.k_scales)
            .map(|j| {
                let w = s.g.slice_axis(soft, 1, j, j + 1);
                s.g.reshape(w, &[1])
            })
            .collect())
    }

    /// Weighted sum of the prior maps, each resized to the level grid, then
    /// projected to the level width by a bias-free 1×1 conv.
    pub fn dae_reweight<F: Scalar>(
        &self,
        s: &mut Session<F>,
        s_v: &[Var],
        weights: &[Var],
        level: usize,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        if s_v.len() != self.cfg.k_scales || weights.len() != self.cfg.k_scales {
            return Err(VarError::shape(format!(
                "expected {} prior maps and weights, got {} and {}",
                self.cfg.k_scales,
                s_v.len(),
                weights.len()
            )));
        }
        let mut acc: Option<Var> = None;
        for (&map, &wj) in s_v.iter().zip(weights) {
            if s.g.shape(map)[0] != self.cfg.d_code {
                return Err(VarError::shape("prior map channel mismatch"));
            }
            let r = s.g.resize_bilinear(map, h, w);
            let term = s.g.mul_scalar_var(r, wj);
            acc = Some(match acc {
                Some(a) => s.g.add(a, term),
                None => term,
            });
        }
        Ok(self.guides[level - 1].m_proj.forward(s, acc.unwrap()))
    }

    /// Blend the level feature with the projected prior through complementary
    /// per-element weights (two-branch softmax). Returns `(F_g, w1, w2)`.
    pub fn dae_fuse<F: Scalar>(
        &self,
        s: &mut Session<F>,
        f: Var,
        s_hat: Var,
        side: Side,
        level: usize,
    ) -> Result<(Var, Var, Var)> {
        let fs = s.g.shape(f).to_vec();
        if fs != s.g.shape(s_hat) {
            return Err(VarError::shape(format!(
                "fuse inputs disagree: {:?} vs {:?}",
                fs,
                s.g.shape(s_hat)
            )));
        }
        let g = &self.guides[level - 1];
        let net = match side {
            Side::Enc => &g.fuse_enc,
            Side::Dec => &g.fuse_dec,
        };
        let c = fs[0];
        let cat = s.g.concat(&[f, s_hat], 0);
        let logits = net.forward(s, cat, ATTN_WINDOW);
        let a = s.g.slice_axis(logits, 0, 0, c);
        let b = s.g.slice_axis(logits, 0, c, 2 * c);
        // two-way softmax: w1 = σ(a−b), w2 = 1−w1 (exact complement)
        let d = s.g.sub(a, b);
        let w1 = s.g.sigmoid(d);
        let ones = s.g.constant(ndarray::ArrayD::from_elem(IxDyn(&fs), F::one()));
        let w2 = s.g.sub(ones, w1);
        let t1 = s.g.mul(f, w1);
        let t2 = s.g.mul(s_hat, w2);
        let fg = s.g.add(t1, t2);
        Ok((fg, w1, w2))
    }

    /// Mediator-bottleneck attention: queries from `f`, keys/values from
    /// `f_g`, mediator tokens from the pooled concatenation of both. Output
    /// adds residually onto `f` and keeps its shape.
    pub fn aft<F: Scalar>(&self, s: &mut Session<F>, f: Var, f_g: Var, level: usize) -> Result<Var> {
        let fs = s.g.shape(f).to_vec();
        if fs != s.g.shape(f_g) {
            return Err(VarError::shape(format!(
                "attention inputs disagree: {:?} vs {:?}",
                fs,
                s.g.shape(f_g)
            )));
        }
        let (h, w) = (fs[1], fs[2]);
        let cfg = &self.cfg.mediator;
        let tokens = h * w;
        if cfg.l() * 4 > tokens {
            return Err(VarError::config(format!(
                "mediator token count {} exceeds a quarter of the {} feature tokens",
                cfg.l(),
                tokens
            )));
        }
        let i = level - 1;
        let ft = s.g.chw_to_tc(f);
        let fgt = s.g.chw_to_tc(f_g);
        let q = self.aft_q[i].forward(s, ft);
        let k = self.aft_k[i].forward(s, fgt);
        let v = self.aft_v[i].forward(s, fgt);
        // mediator: spatially pooled concat of both inputs
        let pf = s.g.adaptive_avg_pool(f, cfg.l_h, cfg.l_w);
        let pg = s.g.adaptive_avg_pool(f_g, cfg.l_h, cfg.l_w);
        let pcat = s.g.concat(&[pg, pf], 0);
        let ptok = s.g.chw_to_tc(pcat);
        let m = self.aft_m[i].forward(s, ptok);

        let scale = 1.0 / (cfg.d as f64).sqrt();
        let mt = s.g.transpose2(m);
        let qm = s.g.matmul(q, mt);
        let qm = s.g.scale(qm, scale);
        let a_qm = s.g.softmax_rows(qm);
        let kt = s.g.transpose2(k);
        let mk = s.g.matmul(m, kt);
        let mk = s.g.scale(mk, scale);
        let a_mk = s.g.softmax_rows(mk);
        let mid = s.g.matmul(a_mk, v);
        let out = s.g.matmul(a_qm, mid);
        let out = s.g.add(out, ft);
        Ok(s.g.tc_to_chw(out, h, w))
    }

    /// Convex mix of the decoder output with the matching encoder feature
    /// through the level's scalar gate σ(θ).
    pub fn mixup_skip<F: Scalar>(
        &self,
        s: &mut Session<F>,
        f_dec: Var,
        f_enc: Var,
        level: usize,
    ) -> Result<Var> {
        if s.g.shape(f_dec) != s.g.shape(f_enc) {
            return Err(VarError::shape("mix-up inputs disagree"));
        }
        let theta = s.p(&format!("restorer/skip{level}/theta"));
        let gate = s.g.sigmoid(theta);
        let one = s.g.constant(ndarray::ArrayD::from_elem(IxDyn(&[1]), F::one()));
        let inv = s.g.sub(one, gate);
        let a = s.g.mul_scalar_var(f_dec, gate);
        let b = s.g.mul_scalar_var(f_enc, inv);
        Ok(s.g.add(a, b))
    }

    fn guide<F: Scalar>(
        &self,
        s: &mut Session<F>,
        f: Var,
        side: Side,
        level: usize,
        weights: &[Var],
        s_v: &[Var],
        fusion: &mut Vec<(Var, Var)>,
    ) -> Result<Var> {
        let fs = s.g.shape(f).to_vec();
        let f_g = if self.cfg.use_dae {
            let s_hat = self.dae_reweight(s, s_v, weights, level, fs[1], fs[2])?;
            let (fg, w1, w2) = self.dae_fuse(s, f, s_hat, side, level)?;
            fusion.push((w1, w2));
            fg
        } else {
            f
        };
        if self.cfg.use_aft {
            self.aft(s, f, f_g, level)
        } else {
            Ok(f_g)
        }
    }

    /// Full guided U-net pass. `s_v` are the K prior maps (coarsest first),
    /// `f_ev` the three guidance pyramid levels (shallowest first).
    pub fn forward<F: Scalar>(
        &self,
        s: &mut Session<F>,
        image: Var,
        s_v: &[Var],
        f_ev: &[Var],
    ) -> Result<RestoreOut> {
        let shape = s.g.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(VarError::shape(format!("restore wants (3,H,W), got {shape:?}")));
        }
        if shape[1] % 4 != 0 || shape[2] % 4 != 0 {
            return Err(VarError::shape(
                "restore needs H and W divisible by 4".to_string(),
            ));
        }
        if f_ev.len() != 3 {
            return Err(VarError::shape("expected 3 guidance pyramid levels"));
        }
        let (h, w) = (shape[1], shape[2]);

        let mut fusion = Vec::new();
        let mut scale_weights = Vec::with_capacity(3);
        for lv in 1..=3 {
            let ws = if self.cfg.use_dae {
                self.dae_scale_weights(s, f_ev[lv - 1], lv)?
            } else {
                Vec::new()
            };
            scale_weights.push(ws);
        }

        // encoder
        let x = self.in_conv.forward(s, image);
        let f1 = s.g.silu(x);
        let g1 = self.guide(s, f1, Side::Enc, 1, &scale_weights[0], s_v, &mut fusion)?;
        let x = self.down[0].forward(s, g1);
        let f2 = s.g.silu(x);
        let g2 = self.guide(s, f2, Side::Enc, 2, &scale_weights[1], s_v, &mut fusion)?;
        let x = self.down[1].forward(s, g2);
        let f3 = s.g.silu(x);
        let g3 = self.guide(s, f3, Side::Enc, 3, &scale_weights[2], s_v, &mut fusion)?;

        // bottleneck, residual
        let b = self.mid[0].forward(s, g3);
        let b = s.g.silu(b);
        let b = self.mid[1].forward(s, b);
        let b = s.g.silu(b);
        let b = s.g.add(b, g3);

        // decoder
        let d3 = self.guide(s, b, Side::Dec, 3, &scale_weights[2], s_v, &mut fusion)?;
        let m3 = if self.cfg.use_skip {
            self.mixup_skip(s, d3, g3, 3)?
        } else {
            d3
        };
        let u = s.g.resize_bilinear(m3, h / 2, w / 2);
        let u = self.up[0].forward(s, u);
        let u2 = s.g.silu(u);
        let d2 = self.guide(s, u2, Side::Dec, 2, &scale_weights[1], s_v, &mut fusion)?;
        let m2 = if self.cfg.use_skip {
            self.mixup_skip(s, d2, g2, 2)?
        } else {
            d2
        };
        let u = s.g.resize_bilinear(m2, h, w);
        let u = self.up[1].forward(s, u);
        let u1 = s.g.silu(u);
        let d1 = self.guide(s, u1, Side::Dec, 1, &scale_weights[0], s_v, &mut fusion)?;
        let m1 = if self.cfg.use_skip {
            self.mixup_skip(s, d1, g1, 1)?
        } else {
            d1
        };
        let y = self.out_conv.forward(s, m1);
        let image = s.g.sigmoid(y);
        Ok(RestoreOut {
            image,
            fusion,
            scale_weights,
        })
    }
}

/// Residual self-attention stack appended after the frozen encoder; the
/// zero-initialized output projection makes it the identity at init.
/// Parameter family "adapter/…".
pub struct Adapter {
    pub d_code: usize,
    ln1: LayerNorm,
    attn: Mha,
    ln2: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
    out: Linear,
}

impl Adapter {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, d_code: usize) -> Self {
        Adapter {
            d_code,
            ln1: LayerNorm::init(store, "adapter/ln1", d_code),
            attn: Mha::init(store, rng, "adapter/attn", d_code, 2, false),
            ln2: LayerNorm::init(store, "adapter/ln2", d_code),
            mlp1: Linear::init(store, rng, "adapter/mlp1", d_code, 2 * d_code, true),
            mlp2: Linear::init(store, rng, "adapter/mlp2", 2 * d_code, d_code, true),
            out: Linear::init_zero(store, "adapter/out", d_code, d_code, true),
        }
    }

    /// `(d_code, H, W)` → same shape; exact identity at initialization.
    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, latent: Var) -> Result<Var> {
        let shape = s.g.shape(latent).to_vec();
        if shape.len() != 3 || shape[0] != self.d_code {
            return Err(VarError::shape(format!(
                "adapter wants ({}, H, W), got {shape:?}",
                self.d_code
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let t = s.g.chw_to_tc(latent);
        let n = self.ln1.forward(s, t);
        let a = self.attn.forward(s, n, n, None);
        let y = s.g.add(t, a);
        let n = self.ln2.forward(s, y);
        let m = self.mlp1.forward(s, n);
        let m = s.g.silu(m);
        let m = self.mlp2.forward(s, m);
        let y = s.g.add(y, m);
        let delta = self.out.forward(s, y);
        let out = s.g.add(t, delta);
        Ok(s.g.tc_to_chw(out, h, w))
    }
}
