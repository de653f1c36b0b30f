//! Structural edits driven by a [`PruneDecision`], and their mask
//! equivalents.

use super::PruneDecision;
use crate::error::{Error, Result};
use crate::model::{names, ArchKind, ForwardMask, Model, PrunableAxis};

fn require_moe(model: &Model) -> Result<()> {
    if !model.config().is_moe() {
        return Err(Error::WrongArch { expected: "moe".into(), found: model.config().arch_kind.to_string() });
    }
    Ok(())
}

fn slim_glu(model: &mut Model, w: [String; 3], kept: &[usize]) -> Result<()> {
    let p = model.params_mut();
    let w1 = p.get(&w[0])?.select_cols(kept);
    let w2 = p.get(&w[1])?.select_cols(kept);
    let w3 = p.get(&w[2])?.select_rows(kept);
    p.replace(&w[0], w1)?;
    p.replace(&w[1], w2)?;
    p.replace(&w[2], w3)
}

/// Remove expert neurons outside the kept sets.
pub fn slim_experts(model: &Model, kept: &[Vec<Vec<usize>>]) -> Result<Model> {
    require_moe(model)?;
    let d = PruneDecision { expert_neurons: Some(kept.to_vec()), ..Default::default() };
    d.validate(model.config())?;
    let mut m = model.clone();
    for (l, per_layer) in kept.iter().enumerate() {
        for (e, k) in per_layer.iter().enumerate() {
            slim_glu(&mut m, [1, 2, 3].map(|w| names::expert(l, e, w)), k)?;
        }
    }
    m.config_mut().d_expert = kept[0][0].len();
    m.check_consistency()?;
    Ok(m)
}

pub fn slim_dense_ffn(model: &Model, kept: &[Vec<usize>]) -> Result<Model> {
    if model.config().arch_kind != ArchKind::DenseFfn {
        return Err(Error::WrongArch { expected: "dense_ffn".into(), found: model.config().arch_kind.to_string() });
    }
    let d = PruneDecision { ffn_neurons: Some(kept.to_vec()), ..Default::default() };
    d.validate(model.config())?;
    let mut m = model.clone();
    for (l, k) in kept.iter().enumerate() {
        slim_glu(&mut m, [1, 2, 3].map(|w| names::ffn(l, w)), k)?;
    }
    m.config_mut().d_ffn = kept[0].len();
    m.check_consistency()?;
    Ok(m)
}

/// Attention-output columns (and W_O rows) belonging to the kept groups.
fn group_columns(groups: &[usize], group_size: usize, d_head: usize) -> Vec<usize> {
    groups
        .iter()
        .flat_map(|&g| (g * group_size * d_head)..((g + 1) * group_size * d_head))
        .collect()
}

fn kv_columns(groups: &[usize], d_head: usize) -> Vec<usize> {
    groups.iter().flat_map(|&g| (g * d_head)..((g + 1) * d_head)).collect()
}

/// Remove whole GQA groups: the shared key/value head, its query heads and
/// the matching output-projection rows.
pub fn prune_gqa_groups(model: &Model, kept: &[Vec<usize>]) -> Result<Model> {
    let d = PruneDecision { groups: Some(kept.to_vec()), ..Default::default() };
    d.validate(model.config())?;
    let c = model.config().clone();
    let gs = c.group_size();
    let mut m = model.clone();
    for (l, groups) in kept.iter().enumerate() {
        let qcols = group_columns(groups, gs, c.d_head);
        let kvcols = kv_columns(groups, c.d_head);
        let p = m.params_mut();
        let wq = p.get(&names::wq(l))?.select_cols(&qcols);
        let wk = p.get(&names::wk(l))?.select_cols(&kvcols);
        let wv = p.get(&names::wv(l))?.select_cols(&kvcols);
        let wo = p.get(&names::wo(l))?.select_rows(&qcols);
        p.replace(&names::wq(l), wq)?;
        p.replace(&names::wk(l), wk)?;
        p.replace(&names::wv(l), wv)?;
        p.replace(&names::wo(l), wo)?;
    }
    let n_kv = kept[0].len();
    let cfg = m.config_mut();
    cfg.n_head_kv = n_kv;
    cfg.n_head_q = n_kv * gs;
    m.check_consistency()?;
    Ok(m)
}

/// Remove whole experts and their router columns; survivors are renumbered
/// in their original order.
pub fn drop_experts(model: &Model, kept: &[Vec<usize>]) -> Result<Model> {
    require_moe(model)?;
    let d = PruneDecision { experts: Some(kept.to_vec()), ..Default::default() };
    d.validate(model.config())?;
    let n_old = model.config().n_expert;
    let mut m = model.clone();
    for (l, experts) in kept.iter().enumerate() {
        let p = m.params_mut();
        let router = p.get(&names::router(l))?.select_cols(experts);
        p.replace(&names::router(l), router)?;
        let mut moved = Vec::new();
        for e in 0..n_old {
            for w in 1..=3 {
                let entry = p.remove(&names::expert(l, e, w))?;
                moved.push((e, w, entry));
            }
        }
        for (e, w, entry) in moved {
            if let Some(new_e) = experts.iter().position(|&k| k == e) {
                let axis = PrunableAxis::ExpertNeuron { layer: l, expert: new_e };
                p.register(names::expert(l, new_e, w), entry.tensor, axis)?;
            }
        }
    }
    m.config_mut().n_expert = kept[0].len();
    m.check_consistency()?;
    Ok(m)
}

/// Apply every axis of `decision`. Expert neuron sets use the original
/// expert numbering even when experts are dropped in the same decision.
pub fn apply_decision(model: &Model, decision: &PruneDecision) -> Result<Model> {
    decision.validate(model.config())?;
    let mut m = model.clone();
    if let Some(g) = &decision.groups {
        m = prune_gqa_groups(&m, g)?;
    }
    let neurons = match (&decision.experts, &decision.expert_neurons) {
        (Some(x), Some(n)) => Some(x.iter().zip(n).map(|(keep, per)| keep.iter().map(|&e| per[e].clone()).collect()).collect::<Vec<Vec<_>>>()),
        (_, n) => n.clone(),
    };
    if let Some(x) = &decision.experts {
        m = drop_experts(&m, x)?;
    }
    if let Some(n) = neurons {
        m = slim_experts(&m, &n)?;
    }
    if let Some(f) = &decision.ffn_neurons {
        m = slim_dense_ffn(&m, f)?;
    }
    Ok(m)
}

fn indicator(n: usize, kept: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; n];
    for &k in kept {
        v[k] = 1.0;
    }
    v
}

/// Zero masks reproducing `decision` on the full-size model.
pub fn masked_forward_setup(model: &Model, decision: &PruneDecision) -> Result<ForwardMask> {
    let c = model.config();
    decision.validate(c)?;
    let mut mask = ForwardMask::default();
    if let Some(en) = &decision.expert_neurons {
        for (l, per_layer) in en.iter().enumerate() {
            for (e, kept) in per_layer.iter().enumerate() {
                mask.expert_neurons.insert((l, e), indicator(c.d_expert, kept));
            }
        }
    }
    if let Some(f) = &decision.ffn_neurons {
        for (l, kept) in f.iter().enumerate() {
            mask.ffn_neurons.insert(l, indicator(c.d_ffn, kept));
        }
    }
    if let Some(g) = &decision.groups {
        for (l, groups) in g.iter().enumerate() {
            let cols = group_columns(groups, c.group_size(), c.d_head);
            mask.head_columns.insert(l, indicator(c.n_head_q * c.d_head, &cols));
        }
    }
    if let Some(x) = &decision.experts {
        for (l, kept) in x.iter().enumerate() {
            let mut dropped = vec![true; c.n_expert];
            for &k in kept {
                dropped[k] = false;
            }
            mask.dropped_experts.insert(l, dropped);
        }
    }
    Ok(mask)
}
