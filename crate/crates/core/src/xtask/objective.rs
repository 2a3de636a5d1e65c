use serde::{Deserialize, Serialize};

use super::mapping::{label_to_dense, map_to_joint, prediction_to_dense, MappingNet};
use super::{cross_task_loss, is_degenerate, mapping_regularizer, Direction};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::losses::{combine_supervised, supervised_terms, ImageForward, Objective};
use crate::network::MtlNetwork;
use crate::params::{ParamId, Session};
use crate::task::Sample;

/// Which cross-task terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum XtaskVariant {
    /// Consistency plus both regularizer terms.
    Full,
    /// Consistency only.
    NoReg,
}

/// Cross-task part of the objective, already divided by the batch size.
pub struct CrossTaskTerms {
    pub total: Var,
    pub consistency: f64,
    pub regularizer: f64,
    pub ct_terms: usize,
    pub reg_terms: usize,
    pub eps_guarded: bool,
}

/// `(1/N) Σ_n (1/|U_n|) Σ_{s∈U_n, t∈T_n} [L_ct(m^{s→st}(ŷ^s), m^{t→st}(y^t))
/// + R(f(x), m^{s→st}(ŷ^s)) + R(f(x), m^{t→st}(y^t))]`.
pub fn cross_task_terms(
    net: &MtlNetwork,
    mapping: &MappingNet,
    s: &mut Session,
    batch: &[&Sample],
    fwd: &mut [ImageForward],
    variant: XtaskVariant,
) -> Result<CrossTaskTerms> {
    let n = batch.len() as f64;
    let mut terms = Vec::new();
    let (mut consistency, mut regularizer) = (0.0, 0.0);
    let (mut ct_terms, mut reg_terms) = (0, 0);
    let mut eps_guarded = false;
    for (sample, f) in batch.iter().zip(fwd.iter_mut()) {
        let unlabelled = &sample.mask.unlabelled;
        if unlabelled.is_empty() {
            continue;
        }
        let w = 1.0 / (unlabelled.len() as f64 * n);
        for &src in unlabelled {
            let spec_s = net.tasks.get(src)?;
            let pred = f.pred(net, s, src)?;
            let dense_s = prediction_to_dense(s, pred, spec_s)?;
            for &tgt in &sample.mask.labelled {
                let spec_t = net.tasks.get(tgt)?;
                let label =
                    sample.label(tgt).ok_or_else(|| Error::InvalidInput(format!("missing label for task {tgt}")))?;
                let dense_t = label_to_dense(s, label, spec_t, sample.height, sample.width)?;
                let e_s = map_to_joint(mapping, s, dense_s, (src, tgt), Direction::Source)?;
                let e_t = map_to_joint(mapping, s, dense_t, (src, tgt), Direction::Target)?;
                eps_guarded |= is_degenerate(&s.graph, e_s, e_t);
                let ct = cross_task_loss(&mut s.graph, e_s, e_t)?;
                consistency += w * s.graph.scalar(ct);
                terms.push(s.graph.scale(ct, w));
                ct_terms += 1;
                if variant == XtaskVariant::Full {
                    for e in [e_s, e_t] {
                        let r = mapping_regularizer(&mut s.graph, f.feature, e)?;
                        regularizer += w * s.graph.scalar(r);
                        terms.push(s.graph.scale(r, w));
                        reg_terms += 1;
                    }
                }
            }
        }
    }
    let total = s.graph.add_all(&terms)?;
    Ok(CrossTaskTerms { total, consistency, regularizer, ct_terms, reg_terms, eps_guarded })
}

/// Supervised objective plus `λ_ct` times the cross-task terms. Images
/// without unlabelled tasks contribute only their supervised part, so on a
/// fully labelled batch this equals the supervised objective exactly.
pub fn full_objective(
    net: &MtlNetwork,
    mapping: &MappingNet,
    s: &mut Session,
    batch: &[&Sample],
    lambda_ct: f64,
    variant: XtaskVariant,
    log_vars: Option<&[ParamId]>,
) -> Result<Objective> {
    let mut fwd = batch.iter().map(|b| ImageForward::new(net, s, b)).collect::<Result<Vec<_>>>()?;
    let (shares, mut report) = supervised_terms(net, s, batch, &mut fwd)?;
    let sup = combine_supervised(s, &shares, log_vars)?;
    let ct = cross_task_terms(net, mapping, s, batch, &mut fwd, variant)?;
    let total = if ct.ct_terms == 0 {
        sup
    } else {
        let scaled = s.graph.scale(ct.total, lambda_ct);
        s.graph.add(sup, scaled)?
    };
    report.cross_task = lambda_ct * ct.consistency;
    report.regularizer = lambda_ct * ct.regularizer;
    report.ct_terms = ct.ct_terms;
    report.reg_terms = ct.reg_terms;
    report.eps_guarded = ct.eps_guarded;
    report.total = s.graph.scalar(total);
    Ok(Objective { total, report })
}
