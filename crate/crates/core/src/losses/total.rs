//! The combined objective: one forward pass over the ID and OOD rows, each
//! enabled term evaluated on the shared outputs, one backward pass.

use super::head::{assemble, dhcl_loss, farthest_positives};
use super::{check_labels, ocl_loss, oe_loss, tcpl_loss, LossWeights, TcplForm};
use crate::datagen::HeadTail;
use crate::diffcore::DenseMatrix;
use crate::error::{CoclError, Result};
use crate::model::{backward, forward_cached, ModelParams, ParamGrads, PrototypeBank};

/// One optimization step's worth of rows.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub id_inputs: DenseMatrix,
    pub id_labels: Vec<usize>,
    pub ood_inputs: DenseMatrix,
    /// Per OOD anchor, a position in the batch's head-class pool (the ID rows
    /// whose class is a head class, in row order). Drawn before the forward
    /// pass so the loss is a deterministic function of the parameters.
    pub negatives: Vec<usize>,
}

impl StepBatch {
    /// Row indices of head-class ID rows.
    pub fn head_pool(&self, groups: &HeadTail) -> Vec<usize> {
        (0..self.id_labels.len())
            .filter(|&i| groups.is_head(self.id_labels[i]))
            .collect()
    }

    pub fn tail_rows(&self, groups: &HeadTail) -> Vec<usize> {
        (0..self.id_labels.len())
            .filter(|&i| groups.is_tail(self.id_labels[i]))
            .collect()
    }
}

/// Unweighted term values and the weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    /// Classification term (outlier-class or outlier-exposure).
    pub ocl: f64,
    pub tcpl: f64,
    pub dhcl: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TotalLossOutput {
    pub breakdown: LossBreakdown,
    pub param_grads: ParamGrads,
    /// Gradient for the prototype bank, when the tail term is enabled.
    pub bank_grad: Option<DenseMatrix>,
    pub dhcl_active: usize,
}

pub fn total_loss(
    params: &ModelParams,
    bank: Option<&PrototypeBank>,
    batch: &StepBatch,
    groups: &HeadTail,
    weights: &LossWeights,
    form: TcplForm,
) -> Result<TotalLossOutput> {
    let cfg = &params.config;
    let k = cfg.num_id_classes;
    let n_id = batch.id_inputs.rows();
    let n_ood = batch.ood_inputs.rows();
    if batch.id_labels.len() != n_id {
        return Err(CoclError::shape("one label per ID row required"));
    }
    if n_ood > 0 && batch.ood_inputs.cols() != batch.id_inputs.cols() {
        return Err(CoclError::shape("ID and OOD inputs must have the same width"));
    }
    check_labels(&batch.id_labels, k)?;
    let use_tail = weights.alpha > 0.0;
    let use_head = weights.beta > 0.0;
    if !cfg.outlier_class && (use_tail || use_head) {
        return Err(CoclError::config("outlier exposure cannot be combined with the representation terms"));
    }
    if use_tail && bank.is_none() {
        return Err(CoclError::config("tail term enabled without a prototype bank"));
    }

    let mut rows = Vec::with_capacity((n_id + n_ood) * cfg.input_dim);
    rows.extend_from_slice(batch.id_inputs.data());
    rows.extend_from_slice(batch.ood_inputs.data());
    let inputs = DenseMatrix::new(n_id + n_ood, cfg.input_dim, rows)?;
    let (outputs, cache) = forward_cached(params, &inputs)?;
    let mut dlogits = DenseMatrix::zeros(outputs.logits.rows(), outputs.logits.cols());
    let mut dembed = DenseMatrix::zeros(outputs.embeddings.rows(), outputs.embeddings.cols());
    let mut breakdown = LossBreakdown::default();

    if cfg.outlier_class {
        let mut labels = batch.id_labels.clone();
        labels.resize(n_id + n_ood, k);
        let (v, g) = ocl_loss(&outputs.logits, &labels, weights.gamma)?;
        breakdown.ocl = v;
        dlogits = g;
    } else {
        let all: Vec<usize> = (0..n_id).collect();
        let ood: Vec<usize> = (n_id..n_id + n_ood).collect();
        let out = oe_loss(
            &outputs.logits.select_rows(&all),
            &batch.id_labels,
            &outputs.logits.select_rows(&ood),
            weights.gamma,
        )?;
        breakdown.ocl = out.value;
        scatter(&mut dlogits, &all, &out.id_grad, 1.0);
        scatter(&mut dlogits, &ood, &out.ood_grad, 1.0);
    }

    let ood_rows: Vec<usize> = (n_id..n_id + n_ood).collect();
    let ood_emb = outputs.embeddings.select_rows(&ood_rows);
    let mut bank_grad = None;
    if let (true, Some(bank)) = (use_tail, bank) {
        let tail_rows = batch.tail_rows(groups);
        let classes: Vec<usize> = tail_rows.iter().map(|&i| batch.id_labels[i]).collect();
        let out = tcpl_loss(
            &outputs.embeddings.select_rows(&tail_rows),
            &classes,
            bank,
            &ood_emb,
            weights.temperature,
            form,
        )?;
        breakdown.tcpl = out.value;
        scatter(&mut dembed, &tail_rows, &out.tail_grad, weights.alpha);
        scatter(&mut dembed, &ood_rows, &out.ood_grad, weights.alpha);
        let mut g = out.bank_grad;
        g.data_mut().iter_mut().for_each(|v| *v *= weights.alpha);
        bank_grad = Some(g);
    }

    let mut dhcl_active = 0;
    if use_head {
        let pool = batch.head_pool(groups);
        let positives = farthest_positives(&ood_emb);
        if !positives.is_empty() && !pool.is_empty() {
            if batch.negatives.len() != n_ood || batch.negatives.iter().any(|&j| j >= pool.len()) {
                return Err(CoclError::shape("one in-range negative per OOD anchor required"));
            }
            let triplets = assemble(&positives, &batch.negatives);
            let head_emb = outputs.embeddings.select_rows(&pool);
            let out = dhcl_loss(&ood_emb, &head_emb, &triplets, weights.margin)?;
            breakdown.dhcl = out.value;
            dhcl_active = out.active;
            scatter(&mut dembed, &ood_rows, &out.ood_grad, weights.beta);
            scatter(&mut dembed, &pool, &out.head_grad, weights.beta);
        }
    }

    breakdown.total = breakdown.ocl + weights.alpha * breakdown.tcpl + weights.beta * breakdown.dhcl;
    if !breakdown.total.is_finite() {
        return Err(CoclError::numeric(format!("non-finite loss {breakdown:?}")));
    }
    let mut param_grads = params.zero_grads();
    backward(params, &cache, &outputs, &dlogits, &dembed, &mut param_grads)?;
    Ok(TotalLossOutput {
        breakdown,
        param_grads,
        bank_grad,
        dhcl_active,
    })
}

fn scatter(dst: &mut DenseMatrix, rows: &[usize], src: &DenseMatrix, scale: f64) {
    for (r, &i) in rows.iter().enumerate() {
        for (d, s) in dst.row_mut(i).iter_mut().zip(src.row(r)) {
            *d += scale * s;
        }
    }
}
