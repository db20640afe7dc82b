//! Post-LN encoder and decoder layers.

use super::attention::{attention_backward, attention_forward, AttnCache, AttnWeights, RelPosTable};
use crate::error::Result;
use crate::numerics::kernels::{
    add_row, layer_norm, layer_norm_backward, matmul, matmul_nt, matmul_tn, relu, relu_backward,
    LayerNormCache,
};
use crate::numerics::{Grads, ParamGroup, ParamId, ParamStore, Rng, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub(super) struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

impl AttnIds {
    pub(super) fn new(p: &mut ParamStore, prefix: &str, d: usize, std: f64, rng: &mut Rng) -> AttnIds {
        let mut w = |n: &str| p.add_normal(&format!("{prefix}.{n}"), ParamGroup::Model, &[d, d], std, rng);
        AttnIds { wq: w("wq"), wk: w("wk"), wv: w("wv"), wo: w("wo") }
    }

    fn weights<'a>(&self, p: &'a ParamStore) -> AttnWeights<'a> {
        AttnWeights { wq: p.value(self.wq), wk: p.value(self.wk), wv: p.value(self.wv), wo: p.value(self.wo) }
    }
}

#[derive(Clone, Debug)]
pub(super) struct LnIds {
    g: ParamId,
    b: ParamId,
}

impl LnIds {
    pub(super) fn new(p: &mut ParamStore, prefix: &str, d: usize) -> LnIds {
        LnIds {
            g: p.add_ones(&format!("{prefix}.gain"), ParamGroup::Model, &[d]),
            b: p.add_zeros(&format!("{prefix}.bias"), ParamGroup::Model, &[d]),
        }
    }

    fn forward(&self, p: &ParamStore, x: &Tensor) -> (Tensor, LayerNormCache) {
        layer_norm(x, p.value(self.g), p.value(self.b), LN_EPS)
    }

    fn backward(&self, p: &ParamStore, cache: &LayerNormCache, dy: &Tensor, g: &mut Grads) -> Tensor {
        let (dx, dg, db) = layer_norm_backward(cache, p.value(self.g), dy);
        g.get_mut(self.g).add_assign(&dg);
        g.get_mut(self.b).add_assign(&db);
        dx
    }
}

#[derive(Clone, Debug)]
pub(super) struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

pub(super) struct FfnCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl FfnIds {
    pub(super) fn new(p: &mut ParamStore, prefix: &str, d: usize, hidden: usize, std: f64, rng: &mut Rng) -> FfnIds {
        FfnIds {
            w1: p.add_normal(&format!("{prefix}.w1"), ParamGroup::Model, &[d, hidden], std, rng),
            b1: p.add_zeros(&format!("{prefix}.b1"), ParamGroup::Model, &[hidden]),
            w2: p.add_normal(&format!("{prefix}.w2"), ParamGroup::Model, &[hidden, d], std, rng),
            b2: p.add_zeros(&format!("{prefix}.b2"), ParamGroup::Model, &[d]),
        }
    }

    fn forward(&self, p: &ParamStore, x: &Tensor) -> Result<(Tensor, FfnCache)> {
        let pre = add_row(&matmul(x, p.value(self.w1))?, p.value(self.b1));
        let act = relu(&pre);
        let out = add_row(&matmul(&act, p.value(self.w2))?, p.value(self.b2));
        Ok((out, FfnCache { x: x.clone(), pre, act }))
    }

    fn backward(&self, p: &ParamStore, c: &FfnCache, dy: &Tensor, g: &mut Grads) -> Result<Tensor> {
        g.get_mut(self.w2).add_assign(&matmul_tn(&c.act, dy)?);
        g.get_mut(self.b2).add_assign(&Tensor::vector(dy.col_sums())?);
        let dpre = relu_backward(&c.pre, &matmul_nt(dy, p.value(self.w2))?);
        g.get_mut(self.w1).add_assign(&matmul_tn(&c.x, &dpre)?);
        g.get_mut(self.b1).add_assign(&Tensor::vector(dpre.col_sums())?);
        matmul_nt(&dpre, p.value(self.w1))
    }
}

type RelIds = Option<(ParamId, ParamId)>;

fn rel_table<'a>(p: &'a ParamStore, rel: &RelIds, clip: usize) -> Option<RelPosTable<'a>> {
    rel.map(|(k, v)| RelPosTable { key: p.value(k), value: p.value(v), clip })
}

fn add_rel_grads(rel: &RelIds, dkey: Option<Tensor>, dvalue: Option<Tensor>, g: &mut Grads) {
    if let (Some((k, v)), Some(dk), Some(dv)) = (rel, dkey, dvalue) {
        g.get_mut(*k).add_assign(&dk);
        g.get_mut(*v).add_assign(&dv);
    }
}

fn add_attn_weight_grads(ids: &AttnIds, a: &super::attention::AttnGrads, g: &mut Grads) {
    g.get_mut(ids.wq).add_assign(&a.dwq);
    g.get_mut(ids.wk).add_assign(&a.dwk);
    g.get_mut(ids.wv).add_assign(&a.dwv);
    g.get_mut(ids.wo).add_assign(&a.dwo);
}

#[derive(Clone, Debug)]
pub(super) struct EncLayerIds {
    pub attn: AttnIds,
    pub rel: RelIds,
    pub ln1: LnIds,
    pub ffn: FfnIds,
    pub ln2: LnIds,
}

pub(super) struct EncLayerCache {
    attn: AttnCache,
    ln1: LayerNormCache,
    ffn: FfnCache,
    ln2: LayerNormCache,
}

impl EncLayerIds {
    pub(super) fn forward(&self, p: &ParamStore, x: &Tensor, heads: usize, clip: usize) -> Result<(Tensor, EncLayerCache)> {
        let rel = rel_table(p, &self.rel, clip);
        let (a, attn) = attention_forward(x, x, &self.attn.weights(p), heads, rel.as_ref(), false)?;
        let (h, ln1) = self.ln1.forward(p, &x.add(&a)?);
        let (f, ffn) = self.ffn.forward(p, &h)?;
        let (out, ln2) = self.ln2.forward(p, &h.add(&f)?);
        Ok((out, EncLayerCache { attn, ln1, ffn, ln2 }))
    }

    pub(super) fn backward(&self, p: &ParamStore, c: &EncLayerCache, dout: &Tensor, clip: usize, g: &mut Grads) -> Result<Tensor> {
        let ds2 = self.ln2.backward(p, &c.ln2, dout, g);
        let mut dh = self.ffn.backward(p, &c.ffn, &ds2, g)?;
        dh.add_assign(&ds2);
        let ds1 = self.ln1.backward(p, &c.ln1, &dh, g);
        let rel = rel_table(p, &self.rel, clip);
        let a = attention_backward(&c.attn, &self.attn.weights(p), rel.as_ref(), &ds1)?;
        add_attn_weight_grads(&self.attn, &a, g);
        let mut dx = ds1;
        dx.add_assign(&a.dxq);
        dx.add_assign(&a.dxkv);
        add_rel_grads(&self.rel, a.dkey, a.dvalue, g);
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub(super) struct DecLayerIds {
    pub self_attn: AttnIds,
    pub rel: RelIds,
    pub ln1: LnIds,
    pub cross: AttnIds,
    pub ln2: LnIds,
    pub ffn: FfnIds,
    pub ln3: LnIds,
}

pub(super) struct DecLayerCache {
    pub self_attn: AttnCache,
    ln1: LayerNormCache,
    cross: AttnCache,
    ln2: LayerNormCache,
    ffn: FfnCache,
    ln3: LayerNormCache,
}

impl DecLayerIds {
    pub(super) fn forward(
        &self,
        p: &ParamStore,
        x: &Tensor,
        memory: &Tensor,
        heads: usize,
        clip: usize,
    ) -> Result<(Tensor, DecLayerCache)> {
        let rel = rel_table(p, &self.rel, clip);
        let (a, self_attn) = attention_forward(x, x, &self.self_attn.weights(p), heads, rel.as_ref(), true)?;
        let (h1, ln1) = self.ln1.forward(p, &x.add(&a)?);
        let (c, cross) = attention_forward(&h1, memory, &self.cross.weights(p), heads, None, false)?;
        let (h2, ln2) = self.ln2.forward(p, &h1.add(&c)?);
        let (f, ffn) = self.ffn.forward(p, &h2)?;
        let (out, ln3) = self.ln3.forward(p, &h2.add(&f)?);
        Ok((out, DecLayerCache { self_attn, ln1, cross, ln2, ffn, ln3 }))
    }

    /// Returns the input and memory gradients.
    pub(super) fn backward(
        &self,
        p: &ParamStore,
        c: &DecLayerCache,
        dout: &Tensor,
        clip: usize,
        g: &mut Grads,
    ) -> Result<(Tensor, Tensor)> {
        let ds3 = self.ln3.backward(p, &c.ln3, dout, g);
        let mut dh2 = self.ffn.backward(p, &c.ffn, &ds3, g)?;
        dh2.add_assign(&ds3);
        let ds2 = self.ln2.backward(p, &c.ln2, &dh2, g);
        let ca = attention_backward(&c.cross, &self.cross.weights(p), None, &ds2)?;
        add_attn_weight_grads(&self.cross, &ca, g);
        let mut dh1 = ds2;
        dh1.add_assign(&ca.dxq);
        let ds1 = self.ln1.backward(p, &c.ln1, &dh1, g);
        let rel = rel_table(p, &self.rel, clip);
        let sa = attention_backward(&c.self_attn, &self.self_attn.weights(p), rel.as_ref(), &ds1)?;
        add_attn_weight_grads(&self.self_attn, &sa, g);
        let mut dx = ds1;
        dx.add_assign(&sa.dxq);
        dx.add_assign(&sa.dxkv);
        add_rel_grads(&self.rel, sa.dkey, sa.dvalue, g);
        Ok((dx, ca.dxkv))
    }
}
