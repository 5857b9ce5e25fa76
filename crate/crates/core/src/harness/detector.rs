//! A minimal single-class detector: configurable stem (stride 2), a small
//! conv backbone emitting P3/P4/P5 at strides 8/16/32, SPPF on P5 with an
//! optional relation module before or after it, optional cross-scale
//! attention enhancing P4, a top-down merge, and an anchor-free head at
//! stride 16.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::csha::{csha_backward, csha_forward_cached, CshaCache, CshaWeights};
use crate::grm::{grm_backward, grm_forward_cached, GrmCache, GrmVariant, GrmWeights};
use crate::harness::config::{DetectorConfig, GrmChoice, GrmPosition, StemChoice};
use crate::harness::sppf::{sppf_backward, sppf_forward_cached, SppfCache, SppfWeights};
use crate::ops::{silu_backward, silu_forward, Conv2d};
use crate::rhwd::{
    focus_backward, focus_forward_cached, largekernel_backward, largekernel_forward_cached,
    rhwd_backward, rhwd_forward_cached, FocusCache, FocusWeights, LargekernelCache, RhwdCache,
    RhwdWeights, StemMode,
};
use crate::tensor::FeatureMap;
use crate::{Error, Result};

/// Head output channels: objectness logit, then (tx, ty, tw, th).
pub const HEAD_CHANNELS: usize = 5;
/// Stride of the head's feature map relative to the input image.
pub const HEAD_STRIDE: usize = 16;

#[derive(Debug, Clone)]
pub enum StemWeights {
    Rhwd(RhwdWeights),
    Largekernel(RhwdWeights),
    Focus(FocusWeights),
}

pub enum StemCache {
    Rhwd(RhwdCache),
    Largekernel(LargekernelCache),
    Focus(FocusCache),
}

/// Conv + SiLU backbone block.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
}

impl ConvBlock {
    fn forward_cached(&self, input: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
        let pre = self.conv.forward(input)?;
        let mut act = pre.clone();
        act.data = silu_forward(&pre.data);
        Ok((act, pre))
    }

    fn backward(
        &self,
        input: &FeatureMap,
        pre_act: &FeatureMap,
        grad_act: &FeatureMap,
    ) -> (FeatureMap, Vec<f64>, Vec<f64>) {
        let mut grad_pre = grad_act.clone();
        grad_pre.data = silu_backward(&pre_act.data, &grad_act.data);
        self.conv.backward(input, &grad_pre)
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub image_size: usize,
    pub stem: StemWeights,
    /// Six blocks: two per backbone stage.
    pub backbone: Vec<ConvBlock>,
    pub grm: Option<GrmWeights>,
    pub sppf: SppfWeights,
    pub csha: Option<CshaWeights>,
    /// 1x1 lateral mapping the post-SPPF P5 to P4 width for the merge.
    pub lat5: Conv2d,
    pub head: Conv2d,
}

fn pick_heads(channels: usize) -> usize {
    for h in [8, 4, 2] {
        if channels % h == 0 {
            return h;
        }
    }
    1
}

pub fn build_detector(cfg: &DetectorConfig, image_size: usize, seed: u64) -> Result<Detector> {
    cfg.validate()?;
    if image_size == 0 || image_size % 32 != 0 {
        return Err(Error::Config(format!(
            "image size must be a positive multiple of 32, got {image_size}"
        )));
    }
    if cfg.p3_channels != cfg.p4_channels {
        return Err(Error::Config(
            "the top-down merge requires equal P3 and P4 widths".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = match cfg.stem {
        StemChoice::Rhwd => StemWeights::Rhwd(RhwdWeights::new(&mut rng, 1, cfg.stem_channels)?),
        StemChoice::Largekernel => {
            StemWeights::Largekernel(RhwdWeights::new(&mut rng, 1, cfg.stem_channels)?)
        }
        StemChoice::Focus => StemWeights::Focus(FocusWeights::new(&mut rng, 1, cfg.stem_channels)?),
    };
    let (c0, c3, c4, c5) = (cfg.stem_channels, cfg.p3_channels, cfg.p4_channels, cfg.p5_channels);
    let backbone = vec![
        // Stage 1 to stride 8 (P3).
        ConvBlock { conv: Conv2d::new(&mut rng, c3, c0, 4, 4, 2, 1) },
        ConvBlock { conv: Conv2d::new(&mut rng, c3, c3, 4, 4, 2, 1) },
        // Stage 2 to stride 16 (P4).
        ConvBlock { conv: Conv2d::new(&mut rng, c4, c3, 4, 4, 2, 1) },
        ConvBlock { conv: Conv2d::new(&mut rng, c4, c4, 3, 3, 1, 1) },
        // Stage 3 to stride 32 (P5).
        ConvBlock { conv: Conv2d::new(&mut rng, c5, c4, 4, 4, 2, 1) },
        ConvBlock { conv: Conv2d::new(&mut rng, c5, c5, 3, 3, 1, 1) },
    ];
    let grm = match cfg.grm {
        GrmChoice::None => None,
        _ => {
            let side = image_size / 32;
            Some(GrmWeights::new(&mut rng, side * side, c5, pick_heads(c5))?)
        }
    };
    let sppf = SppfWeights::new(&mut rng, c5);
    let csha = if cfg.csha_enabled {
        Some(CshaWeights::new(&mut rng, c3, c4, c5, c4, pick_heads(c4), 4)?)
    } else {
        None
    };
    let lat5 = Conv2d::new(&mut rng, c4, c5, 1, 1, 1, 0);
    let mut head = Conv2d::new(&mut rng, HEAD_CHANNELS, c4, 3, 3, 1, 1);
    // Start with a low objectness prior so early training is not swamped by
    // confident false positives.
    head.bias[0] = -2.0;
    // Start the box-size prior near the synthetic object scale (about 6 px
    // at stride 16) instead of one full stride, so early regression steps
    // refine boxes rather than fight the parameterization.
    head.bias[3] = (6.0f64 / HEAD_STRIDE as f64).ln();
    head.bias[4] = head.bias[3];
    Ok(Detector {
        cfg: cfg.clone(),
        image_size,
        stem,
        backbone,
        grm,
        sppf,
        csha,
        lat5,
        head,
    })
}

impl Detector {
    fn grm_variant(&self) -> GrmVariant {
        match self.cfg.grm {
            GrmChoice::Grm => GrmVariant::Grm,
            _ => GrmVariant::PlainMhsa,
        }
    }

    /// Override the head's box-size prior: predicted extents start at
    /// `exp(wh_bias) * stride` pixels.
    pub fn set_head_size_prior(&mut self, wh_bias: f64) {
        self.head.bias[3] = wh_bias;
        self.head.bias[4] = wh_bias;
    }
}

fn upsample2(input: &FeatureMap) -> FeatureMap {
    let mut out = FeatureMap::zeros(input.b, input.c, input.h * 2, input.w * 2);
    for b in 0..input.b {
        for c in 0..input.c {
            for y in 0..out.h {
                for x in 0..out.w {
                    *out.at_mut(b, c, y, x) = input.at(b, c, y / 2, x / 2);
                }
            }
        }
    }
    out
}

fn upsample2_backward(grad_out: &FeatureMap) -> FeatureMap {
    let mut grad = FeatureMap::zeros(grad_out.b, grad_out.c, grad_out.h / 2, grad_out.w / 2);
    for b in 0..grad_out.b {
        for c in 0..grad_out.c {
            for y in 0..grad_out.h {
                for x in 0..grad_out.w {
                    *grad.at_mut(b, c, y / 2, x / 2) += grad_out.at(b, c, y, x);
                }
            }
        }
    }
    grad
}

fn add_into(dst: &mut FeatureMap, src: &FeatureMap) {
    for (d, s) in dst.data.iter_mut().zip(src.data.iter()) {
        *d += s;
    }
}

pub struct DetectorCache {
    stem_cache: StemCache,
    stem_out: FeatureMap,
    /// Per backbone block: (pre-activation, activation).
    blocks: Vec<(FeatureMap, FeatureMap)>,
    pub p3: FeatureMap,
    pub p4: FeatureMap,
    /// P5 as produced by the backbone, before the relation module / SPPF.
    pub p5_raw: FeatureMap,
    grm_input: Option<FeatureMap>,
    grm_cache: Option<GrmCache>,
    sppf_input: FeatureMap,
    sppf_cache: SppfCache,
    p5_post: FeatureMap,
    csha_cache: Option<CshaCache>,
    merged_p4: FeatureMap,
    /// Top-down P3 merge; produced for the pyramid contract, not consumed
    /// by the single-level head.
    pub merged_p3: FeatureMap,
}

impl Detector {
    pub fn forward(&mut self, images: &FeatureMap, mode: StemMode) -> Result<FeatureMap> {
        self.forward_cached(images, mode).map(|(o, _)| o)
    }

    pub fn forward_cached(
        &mut self,
        images: &FeatureMap,
        mode: StemMode,
    ) -> Result<(FeatureMap, DetectorCache)> {
        let (stem_out, stem_cache) = match &mut self.stem {
            StemWeights::Rhwd(w) => {
                let (o, c) = rhwd_forward_cached(images, w, mode)?;
                (o, StemCache::Rhwd(c))
            }
            StemWeights::Largekernel(w) => {
                let (o, c) = largekernel_forward_cached(images, w, mode)?;
                (o, StemCache::Largekernel(c))
            }
            StemWeights::Focus(w) => {
                let (o, c) = focus_forward_cached(images, w, mode)?;
                (o, StemCache::Focus(c))
            }
        };
        let mut blocks = Vec::with_capacity(self.backbone.len());
        let mut x = stem_out.clone();
        let mut taps = Vec::with_capacity(3);
        for (i, block) in self.backbone.iter().enumerate() {
            let (act, pre) = block.forward_cached(&x)?;
            blocks.push((pre, act.clone()));
            if i == 1 || i == 3 || i == 5 {
                taps.push(act.clone());
            }
            x = act;
        }
        let (p3, p4, p5_raw) = (taps[0].clone(), taps[1].clone(), taps[2].clone());

        let (grm_input, grm_cache, sppf_input, p5_post_pre_grm);
        match (self.cfg.grm, self.cfg.grm_position) {
            (GrmChoice::None, _) => {
                grm_input = None;
                grm_cache = None;
                sppf_input = p5_raw.clone();
                p5_post_pre_grm = true;
            }
            (_, GrmPosition::BeforeSppf) => {
                let w = self.grm.as_ref().expect("grm weights exist");
                let (g, c) = grm_forward_cached(&p5_raw, w, self.grm_variant())?;
                grm_input = Some(p5_raw.clone());
                grm_cache = Some(c);
                sppf_input = g;
                p5_post_pre_grm = true;
            }
            (_, GrmPosition::AfterSppf) => {
                grm_input = None; // filled after SPPF below
                grm_cache = None;
                sppf_input = p5_raw.clone();
                p5_post_pre_grm = false;
            }
        }
        let (sppf_out, sppf_cache) = sppf_forward_cached(&sppf_input, &self.sppf)?;
        let (grm_input, grm_cache, p5_post) = if p5_post_pre_grm {
            (grm_input, grm_cache, sppf_out)
        } else {
            let w = self.grm.as_ref().expect("grm weights exist");
            let (g, c) = grm_forward_cached(&sppf_out, w, self.grm_variant())?;
            (Some(sppf_out), Some(c), g)
        };

        let (enhanced_p4, csha_cache) = match &self.csha {
            Some(w) => {
                let (o, c) = csha_forward_cached(&p3, &p4, &p5_post, w)?;
                (o, Some(c))
            }
            None => (p4.clone(), None),
        };
        let lat5_out = self.lat5.forward(&p5_post)?;
        let mut merged_p4 = enhanced_p4.clone();
        add_into(&mut merged_p4, &upsample2(&lat5_out));
        let mut merged_p3 = p3.clone();
        add_into(&mut merged_p3, &upsample2(&merged_p4));
        let head_map = self.head.forward(&merged_p4)?;
        Ok((
            head_map,
            DetectorCache {
                stem_cache,
                stem_out,
                blocks,
                p3,
                p4,
                p5_raw,
                grm_input,
                grm_cache,
                sppf_input,
                sppf_cache,
                p5_post,
                csha_cache,
                merged_p4,
                merged_p3,
            },
        ))
    }

    /// Backward through the whole detector; returns named gradients in the
    /// exact order of [`Detector::param_entries`].
    pub fn backward(
        &self,
        images: &FeatureMap,
        cache: &DetectorCache,
        grad_head: &FeatureMap,
    ) -> Vec<(String, Vec<f64>)> {
        let (grad_merged_p4, head_k, head_b) = self.head.backward(&cache.merged_p4, grad_head);

        // Top-down merge: the merged map feeds the head only.
        let grad_enhanced_p4 = grad_merged_p4.clone();
        let grad_lat5_out = upsample2_backward(&grad_merged_p4);
        let (grad_p5_post_lat, lat5_k, lat5_b) = self.lat5.backward(&cache.p5_post, &grad_lat5_out);

        let mut grad_p3 = FeatureMap::zeros(cache.p3.b, cache.p3.c, cache.p3.h, cache.p3.w);
        let mut grad_p4 = FeatureMap::zeros(cache.p4.b, cache.p4.c, cache.p4.h, cache.p4.w);
        let mut grad_p5_post = grad_p5_post_lat;
        let mut csha_grads = None;
        match (&self.csha, &cache.csha_cache) {
            (Some(w), Some(c)) => {
                let g = csha_backward(&cache.p3, &cache.p4, &cache.p5_post, w, c, &grad_enhanced_p4);
                add_into(&mut grad_p3, &g.p3);
                add_into(&mut grad_p4, &g.p4);
                add_into(&mut grad_p5_post, &g.p5);
                csha_grads = Some(g);
            }
            _ => add_into(&mut grad_p4, &grad_enhanced_p4),
        }

        // P5 path back through GRM/SPPF in the configured order.
        let (grm_only, sppf_grads, grad_p5_raw) = match (self.cfg.grm, self.cfg.grm_position) {
            (GrmChoice::None, _) => {
                let g = sppf_backward(&cache.sppf_input, &self.sppf, &cache.sppf_cache, &grad_p5_post);
                let grad = g.input.clone();
                (None, g, grad)
            }
            (_, GrmPosition::BeforeSppf) => {
                let g = sppf_backward(&cache.sppf_input, &self.sppf, &cache.sppf_cache, &grad_p5_post);
                let gg = grm_backward(
                    cache.grm_input.as_ref().unwrap(),
                    self.grm.as_ref().unwrap(),
                    cache.grm_cache.as_ref().unwrap(),
                    &g.input,
                );
                let grad = gg.p5.clone();
                (Some(gg), g, grad)
            }
            (_, GrmPosition::AfterSppf) => {
                let gg = grm_backward(
                    cache.grm_input.as_ref().unwrap(),
                    self.grm.as_ref().unwrap(),
                    cache.grm_cache.as_ref().unwrap(),
                    &grad_p5_post,
                );
                let g = sppf_backward(&cache.sppf_input, &self.sppf, &cache.sppf_cache, &gg.p5);
                let grad = g.input.clone();
                (Some(gg), g, grad)
            }
        };

        // Backbone stages in reverse. Block inputs: stem_out, then each
        // block's activation.
        let mut block_grads: Vec<(Vec<f64>, Vec<f64>)> = vec![(vec![], vec![]); 6];
        let mut upstream = grad_p5_raw;
        for i in (4..6).rev() {
            let input = if i == 0 { &cache.stem_out } else { &cache.blocks[i - 1].1 };
            let (gi, k, b) = self.backbone[i].backward(input, &cache.blocks[i].0, &upstream);
            block_grads[i] = (k, b);
            upstream = gi;
        }
        add_into(&mut grad_p4, &upstream);
        let mut upstream = grad_p4;
        for i in (2..4).rev() {
            let input = if i == 0 { &cache.stem_out } else { &cache.blocks[i - 1].1 };
            let (gi, k, b) = self.backbone[i].backward(input, &cache.blocks[i].0, &upstream);
            block_grads[i] = (k, b);
            upstream = gi;
        }
        add_into(&mut grad_p3, &upstream);
        let mut upstream = grad_p3;
        for i in (0..2).rev() {
            let input = if i == 0 { &cache.stem_out } else { &cache.blocks[i - 1].1 };
            let (gi, k, b) = self.backbone[i].backward(input, &cache.blocks[i].0, &upstream);
            block_grads[i] = (k, b);
            upstream = gi;
        }

        // Stem.
        let mut out: Vec<(String, Vec<f64>)> = Vec::new();
        match (&self.stem, &cache.stem_cache) {
            (StemWeights::Rhwd(w), StemCache::Rhwd(c)) => {
                let g = rhwd_backward(images, w, c, &upstream);
                out.push(("stem.global_conv.kernel".into(), g.global_kernel));
                out.push(("stem.global_conv.bias".into(), g.global_bias));
                out.push(("stem.global_bn.gamma".into(), g.global_gamma));
                out.push(("stem.global_bn.beta".into(), g.global_beta));
                out.push(("stem.local_conv.kernel".into(), g.local_kernel));
                out.push(("stem.local_conv.bias".into(), g.local_bias));
            }
            (StemWeights::Largekernel(w), StemCache::Largekernel(c)) => {
                let g = largekernel_backward(images, w, c, &upstream);
                out.push(("stem.global_conv.kernel".into(), g.kernel));
                out.push(("stem.global_conv.bias".into(), g.bias));
                out.push(("stem.global_bn.gamma".into(), g.gamma));
                out.push(("stem.global_bn.beta".into(), g.beta));
            }
            (StemWeights::Focus(w), StemCache::Focus(c)) => {
                let g = focus_backward(images, w, c, &upstream);
                out.push(("stem.conv.kernel".into(), g.kernel));
                out.push(("stem.conv.bias".into(), g.bias));
                out.push(("stem.bn.gamma".into(), g.gamma));
                out.push(("stem.bn.beta".into(), g.beta));
            }
            _ => unreachable!("stem cache matches stem weights"),
        }
        for (i, (k, b)) in block_grads.into_iter().enumerate() {
            out.push((format!("backbone.{i}.kernel"), k));
            out.push((format!("backbone.{i}.bias"), b));
        }
        if let Some(gg) = grm_only {
            out.push(("grm.e_pos".into(), gg.e_pos));
            out.push(("grm.w_q.weight".into(), gg.mhsa.w_q.0));
            out.push(("grm.w_q.bias".into(), gg.mhsa.w_q.1));
            out.push(("grm.w_k.weight".into(), gg.mhsa.w_k.0));
            out.push(("grm.w_k.bias".into(), gg.mhsa.w_k.1));
            out.push(("grm.w_v.weight".into(), gg.mhsa.w_v.0));
            out.push(("grm.w_v.bias".into(), gg.mhsa.w_v.1));
            out.push(("grm.w_o.weight".into(), gg.mhsa.w_o.0));
            out.push(("grm.w_o.bias".into(), gg.mhsa.w_o.1));
            out.push(("grm.norm.gamma".into(), gg.gamma));
            out.push(("grm.norm.beta".into(), gg.beta));
        }
        out.push(("sppf.reduce.kernel".into(), sppf_grads.reduce.0));
        out.push(("sppf.reduce.bias".into(), sppf_grads.reduce.1));
        out.push(("sppf.expand.kernel".into(), sppf_grads.expand.0));
        out.push(("sppf.expand.bias".into(), sppf_grads.expand.1));
        if let Some(g) = csha_grads {
            out.push(("csha.proj3.kernel".into(), g.proj3.0));
            out.push(("csha.proj3.bias".into(), g.proj3.1));
            out.push(("csha.proj4.kernel".into(), g.proj4.0));
            out.push(("csha.proj4.bias".into(), g.proj4.1));
            out.push(("csha.proj5.kernel".into(), g.proj5.0));
            out.push(("csha.proj5.bias".into(), g.proj5.1));
            out.push(("csha.offset_head.weight".into(), g.offset_head.0));
            out.push(("csha.offset_head.bias".into(), g.offset_head.1));
            out.push(("csha.attn_head.weight".into(), g.attn_head.0));
            out.push(("csha.attn_head.bias".into(), g.attn_head.1));
            out.push(("csha.out_proj.weight".into(), g.out_proj.0));
            out.push(("csha.out_proj.bias".into(), g.out_proj.1));
        }
        out.push(("lat5.kernel".into(), lat5_k));
        out.push(("lat5.bias".into(), lat5_b));
        out.push(("head.kernel".into(), head_k));
        out.push(("head.bias".into(), head_b));
        out
    }

    /// Trainable parameters in a fixed order, as (name, values) views.
    pub fn param_entries(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out: Vec<(String, &Vec<f64>)> = Vec::new();
        match &self.stem {
            StemWeights::Rhwd(w) => {
                out.push(("stem.global_conv.kernel".into(), &w.global_conv.kernel));
                out.push(("stem.global_conv.bias".into(), &w.global_conv.bias));
                out.push(("stem.global_bn.gamma".into(), &w.global_bn.gamma));
                out.push(("stem.global_bn.beta".into(), &w.global_bn.beta));
                out.push(("stem.local_conv.kernel".into(), &w.local_conv.kernel));
                out.push(("stem.local_conv.bias".into(), &w.local_conv.bias));
            }
            StemWeights::Largekernel(w) => {
                out.push(("stem.global_conv.kernel".into(), &w.global_conv.kernel));
                out.push(("stem.global_conv.bias".into(), &w.global_conv.bias));
                out.push(("stem.global_bn.gamma".into(), &w.global_bn.gamma));
                out.push(("stem.global_bn.beta".into(), &w.global_bn.beta));
            }
            StemWeights::Focus(w) => {
                out.push(("stem.conv.kernel".into(), &w.conv.kernel));
                out.push(("stem.conv.bias".into(), &w.conv.bias));
                out.push(("stem.bn.gamma".into(), &w.bn.gamma));
                out.push(("stem.bn.beta".into(), &w.bn.beta));
            }
        }
        for (i, b) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.kernel"), &b.conv.kernel));
            out.push((format!("backbone.{i}.bias"), &b.conv.bias));
        }
        if let Some(g) = &self.grm {
            out.push(("grm.e_pos".into(), &g.e_pos));
            out.push(("grm.w_q.weight".into(), &g.w_q.weight));
            out.push(("grm.w_q.bias".into(), &g.w_q.bias));
            out.push(("grm.w_k.weight".into(), &g.w_k.weight));
            out.push(("grm.w_k.bias".into(), &g.w_k.bias));
            out.push(("grm.w_v.weight".into(), &g.w_v.weight));
            out.push(("grm.w_v.bias".into(), &g.w_v.bias));
            out.push(("grm.w_o.weight".into(), &g.w_o.weight));
            out.push(("grm.w_o.bias".into(), &g.w_o.bias));
            out.push(("grm.norm.gamma".into(), &g.norm.gamma));
            out.push(("grm.norm.beta".into(), &g.norm.beta));
        }
        out.push(("sppf.reduce.kernel".into(), &self.sppf.reduce.kernel));
        out.push(("sppf.reduce.bias".into(), &self.sppf.reduce.bias));
        out.push(("sppf.expand.kernel".into(), &self.sppf.expand.kernel));
        out.push(("sppf.expand.bias".into(), &self.sppf.expand.bias));
        if let Some(c) = &self.csha {
            out.push(("csha.proj3.kernel".into(), &c.proj3.kernel));
            out.push(("csha.proj3.bias".into(), &c.proj3.bias));
            out.push(("csha.proj4.kernel".into(), &c.proj4.kernel));
            out.push(("csha.proj4.bias".into(), &c.proj4.bias));
            out.push(("csha.proj5.kernel".into(), &c.proj5.kernel));
            out.push(("csha.proj5.bias".into(), &c.proj5.bias));
            out.push(("csha.offset_head.weight".into(), &c.offset_head.weight));
            out.push(("csha.offset_head.bias".into(), &c.offset_head.bias));
            out.push(("csha.attn_head.weight".into(), &c.attn_head.weight));
            out.push(("csha.attn_head.bias".into(), &c.attn_head.bias));
            out.push(("csha.out_proj.weight".into(), &c.out_proj.weight));
            out.push(("csha.out_proj.bias".into(), &c.out_proj.bias));
        }
        out.push(("lat5.kernel".into(), &self.lat5.kernel));
        out.push(("lat5.bias".into(), &self.lat5.bias));
        out.push(("head.kernel".into(), &self.head.kernel));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable views in the same order as [`Detector::param_entries`].
    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = Vec::new();
        match &mut self.stem {
            StemWeights::Rhwd(w) => {
                out.push(("stem.global_conv.kernel".into(), &mut w.global_conv.kernel));
                out.push(("stem.global_conv.bias".into(), &mut w.global_conv.bias));
                out.push(("stem.global_bn.gamma".into(), &mut w.global_bn.gamma));
                out.push(("stem.global_bn.beta".into(), &mut w.global_bn.beta));
                out.push(("stem.local_conv.kernel".into(), &mut w.local_conv.kernel));
                out.push(("stem.local_conv.bias".into(), &mut w.local_conv.bias));
            }
            StemWeights::Largekernel(w) => {
                out.push(("stem.global_conv.kernel".into(), &mut w.global_conv.kernel));
                out.push(("stem.global_conv.bias".into(), &mut w.global_conv.bias));
                out.push(("stem.global_bn.gamma".into(), &mut w.global_bn.gamma));
                out.push(("stem.global_bn.beta".into(), &mut w.global_bn.beta));
            }
            StemWeights::Focus(w) => {
                out.push(("stem.conv.kernel".into(), &mut w.conv.kernel));
                out.push(("stem.conv.bias".into(), &mut w.conv.bias));
                out.push(("stem.bn.gamma".into(), &mut w.bn.gamma));
                out.push(("stem.bn.beta".into(), &mut w.bn.beta));
            }
        }
        for (i, b) in self.backbone.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.kernel"), &mut b.conv.kernel));
            out.push((format!("backbone.{i}.bias"), &mut b.conv.bias));
        }
        if let Some(g) = &mut self.grm {
            out.push(("grm.e_pos".into(), &mut g.e_pos));
            out.push(("grm.w_q.weight".into(), &mut g.w_q.weight));
            out.push(("grm.w_q.bias".into(), &mut g.w_q.bias));
            out.push(("grm.w_k.weight".into(), &mut g.w_k.weight));
            out.push(("grm.w_k.bias".into(), &mut g.w_k.bias));
            out.push(("grm.w_v.weight".into(), &mut g.w_v.weight));
            out.push(("grm.w_v.bias".into(), &mut g.w_v.bias));
            out.push(("grm.w_o.weight".into(), &mut g.w_o.weight));
            out.push(("grm.w_o.bias".into(), &mut g.w_o.bias));
            out.push(("grm.norm.gamma".into(), &mut g.norm.gamma));
            out.push(("grm.norm.beta".into(), &mut g.norm.beta));
        }
        out.push(("sppf.reduce.kernel".into(), &mut self.sppf.reduce.kernel));
        out.push(("sppf.reduce.bias".into(), &mut self.sppf.reduce.bias));
        out.push(("sppf.expand.kernel".into(), &mut self.sppf.expand.kernel));
        out.push(("sppf.expand.bias".into(), &mut self.sppf.expand.bias));
        if let Some(c) = &mut self.csha {
            out.push(("csha.proj3.kernel".into(), &mut c.proj3.kernel));
            out.push(("csha.proj3.bias".into(), &mut c.proj3.bias));
            out.push(("csha.proj4.kernel".into(), &mut c.proj4.kernel));
            out.push(("csha.proj4.bias".into(), &mut c.proj4.bias));
            out.push(("csha.proj5.kernel".into(), &mut c.proj5.kernel));
            out.push(("csha.proj5.bias".into(), &mut c.proj5.bias));
            out.push(("csha.offset_head.weight".into(), &mut c.offset_head.weight));
            out.push(("csha.offset_head.bias".into(), &mut c.offset_head.bias));
            out.push(("csha.attn_head.weight".into(), &mut c.attn_head.weight));
            out.push(("csha.attn_head.bias".into(), &mut c.attn_head.bias));
            out.push(("csha.out_proj.weight".into(), &mut c.out_proj.weight));
            out.push(("csha.out_proj.bias".into(), &mut c.out_proj.bias));
        }
        out.push(("lat5.kernel".into(), &mut self.lat5.kernel));
        out.push(("lat5.bias".into(), &mut self.lat5.bias));
        out.push(("head.kernel".into(), &mut self.head.kernel));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    /// Non-trainable buffers (normalization running statistics).
    pub fn buffer_entries(&self) -> Vec<(String, &Vec<f64>)> {
        match &self.stem {
            StemWeights::Rhwd(w) | StemWeights::Largekernel(w) => vec![
                ("stem.global_bn.running_mean".into(), &w.global_bn.running_mean),
                ("stem.global_bn.running_var".into(), &w.global_bn.running_var),
            ],
            StemWeights::Focus(w) => vec![
                ("stem.bn.running_mean".into(), &w.bn.running_mean),
                ("stem.bn.running_var".into(), &w.bn.running_var),
            ],
        }
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for (_, v) in self.param_entries() {
            flat.extend_from_slice(v);
        }
        flat
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.param_entries().iter().map(|(_, v)| v.len()).sum();
        if flat.len() != total {
            return Err(Error::Shape(format!(
                "expected {total} parameter values, got {}",
                flat.len()
            )));
        }
        let mut off = 0;
        for (_, v) in self.param_entries_mut() {
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// One SGD step over gradients returned by [`Detector::backward`].
    pub fn apply_gradients(&mut self, grads: &[(String, Vec<f64>)], lr: f64, weight_decay: f64) {
        let entries = self.param_entries_mut();
        assert_eq!(entries.len(), grads.len(), "gradient/parameter count mismatch");
        for ((pname, values), (gname, grad)) in entries.into_iter().zip(grads.iter()) {
            assert_eq!(&pname, gname, "gradient order mismatch");
            crate::ops::sgd_step(values, grad, lr, weight_decay);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::LossChoice;

    #[test]
    fn head_geometry_contract_on_64px_input() {
        let cfg = DetectorConfig::default();
        let mut det = build_detector(&cfg, 64, 0).unwrap();
        let images = FeatureMap::filled(1, 1, 64, 64, 0.4);
        let (head, cache) = det.forward_cached(&images, StemMode::Train).unwrap();
        assert_eq!(head.shape(), (1, HEAD_CHANNELS, 4, 4));
        assert_eq!(cache.p3.shape(), (1, 16, 8, 8));
        assert_eq!(cache.p4.shape(), (1, 16, 4, 4));
        assert_eq!(cache.p5_raw.shape(), (1, 24, 2, 2));
        assert_eq!(cache.merged_p3.shape(), (1, 16, 8, 8));
    }

    #[test]
    fn pyramid_strides_hold_for_every_stem() {
        for stem in [StemChoice::Rhwd, StemChoice::Largekernel, StemChoice::Focus] {
            let cfg = DetectorConfig {
                stem,
                ..DetectorConfig::default()
            };
            let mut det = build_detector(&cfg, 64, 1).unwrap();
            let images = FeatureMap::filled(2, 1, 64, 64, 0.2);
            let (_, cache) = det.forward_cached(&images, StemMode::Train).unwrap();
            assert_eq!((cache.p3.h, cache.p4.h, cache.p5_raw.h), (8, 4, 2));
        }
    }

    #[test]
    fn same_seed_builds_identical_weights() {
        let cfg = DetectorConfig::default();
        let a = build_detector(&cfg, 64, 7).unwrap();
        let b = build_detector(&cfg, 64, 7).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
        let c = build_detector(&cfg, 64, 8).unwrap();
        assert_ne!(a.params_flat(), c.params_flat());
    }

    #[test]
    fn all_ablation_rows_run_forward() {
        for (i, cfg) in DetectorConfig::ablation_ladder().iter().enumerate() {
            let mut det = build_detector(cfg, 64, 3).unwrap();
            let images = FeatureMap::filled(1, 1, 64, 64, 0.5);
            let out = det.forward(&images, StemMode::Train).unwrap();
            assert!(out.all_finite(), "row {i} produced non-finite output");
            assert_eq!(out.shape(), (1, HEAD_CHANNELS, 4, 4));
        }
        // Both relation-module placements as well.
        for pos in [GrmPosition::BeforeSppf, GrmPosition::AfterSppf] {
            let cfg = DetectorConfig {
                grm_position: pos,
                loss: LossChoice::IouPlusCenter,
                ..DetectorConfig::default()
            };
            let mut det = build_detector(&cfg, 64, 3).unwrap();
            let images = FeatureMap::filled(1, 1, 64, 64, 0.5);
            assert!(det.forward(&images, StemMode::Train).unwrap().all_finite());
        }
    }

    #[test]
    fn params_round_trip_through_flat_vector() {
        let cfg = DetectorConfig::default();
        let mut det = build_detector(&cfg, 64, 11).unwrap();
        let flat = det.params_flat();
        let mut perturbed = flat.clone();
        perturbed[3] += 1.0;
        det.set_params_flat(&perturbed).unwrap();
        assert_eq!(det.params_flat(), perturbed);
        assert!(det.set_params_flat(&flat[..10]).is_err());
        let names: Vec<String> = det.param_entries().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len(), "duplicate parameter names");
    }
}
