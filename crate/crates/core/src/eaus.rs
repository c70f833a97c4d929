//! Embedding adaptive update: class-attention over the stored category
//! embeddings, the displacement update, k-shot absorption, and the
//! non-update / linear-transform baselines.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::membank::{ClassId, Embedding, MemoryPool};
use crate::numkit::{add_into, dot, softmax, softmax_backward, AffineParams, ParamSet, Rng};
use crate::{Error, Result};

/// Projections `phi`, `psi` for the relation coefficient and the update map
/// `w`; all square and bias-free.
#[derive(Clone, Debug, PartialEq)]
pub struct EausParams {
    pub phi: AffineParams,
    pub psi: AffineParams,
    pub w: AffineParams,
}

impl EausParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            phi: AffineParams::identity(dim, false),
            psi: AffineParams::identity(dim, false),
            w: AffineParams::identity(dim, false),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            phi: AffineParams::zeros(dim, dim, false),
            psi: AffineParams::zeros(dim, dim, false),
            w: AffineParams::zeros(dim, dim, false),
        }
    }

    /// Random projections with `w = 0`, so an untrained update is the
    /// identity.
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        Self {
            phi: AffineParams::init(dim, dim, false, rng),
            psi: AffineParams::init(dim, dim, false, rng),
            w: AffineParams::zeros(dim, dim, false),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.in_dim()
    }
}

impl ParamSet for EausParams {
    fn slices(&self) -> Vec<&[f64]> {
        [&self.phi, &self.psi, &self.w].into_iter().flat_map(|a| a.slices()).collect()
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        [&mut self.phi, &mut self.psi, &mut self.w].into_iter().flat_map(|a| a.slices_mut()).collect()
    }
}

/// Row-stochastic class-attention weights in pool record order.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    weights: Vec<Vec<f64>>,
}

impl AttentionMatrix {
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i]
    }
    pub fn get(&self, i: usize, l: usize) -> f64 {
        self.weights[i][l]
    }
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.weights
    }
}

/// Displacements applied by one strategy application, one per record.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateTrace {
    pub class_ids: Vec<ClassId>,
    pub displacements: Vec<Vec<f64>>,
    pub attention: Option<AttentionMatrix>,
}

impl UpdateTrace {
    pub fn displacement_norms(&self) -> Vec<f64> {
        self.displacements.iter().map(|d| libm::sqrt(dot(d, d))).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum UpdateKind {
    NonUpdate,
    LinearTransform,
    #[default]
    Eaus,
}

/// Which records change, relative to the session being learned: classes
/// from earlier sessions count as base, classes of the current session as
/// new.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum UpdateScope {
    BaseOnly,
    NewOnly,
    #[default]
    Both,
}

impl UpdateScope {
    pub fn includes(self, record_session: u32, current_session: u32) -> bool {
        match self {
            UpdateScope::Both => true,
            UpdateScope::BaseOnly => record_session < current_session,
            UpdateScope::NewOnly => record_session >= current_session,
        }
    }
}

/// Which stored embedding the strategy rewrites. Anything other than
/// `Category` needs a pool built with mutable hyper-class embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum UpdateTarget {
    #[default]
    Category,
    Hyper,
    Both,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct UpdateStrategy {
    pub kind: UpdateKind,
    pub scope: UpdateScope,
    pub target: UpdateTarget,
}

impl UpdateStrategy {
    pub const fn new(kind: UpdateKind, scope: UpdateScope) -> Self {
        Self {
            kind,
            scope,
            target: UpdateTarget::Category,
        }
    }

    pub const NON_UPDATE: Self = Self::new(UpdateKind::NonUpdate, UpdateScope::Both);
    pub const EAUS: Self = Self::new(UpdateKind::Eaus, UpdateScope::Both);
}

/// Every trainable map used by the update strategies.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyParams {
    pub eaus: EausParams,
    /// Shared map of the linear-transform baseline.
    pub lt: AffineParams,
}

impl StrategyParams {
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        Self {
            eaus: EausParams::init(dim, rng),
            lt: AffineParams::identity(dim, false),
        }
    }
}

impl ParamSet for StrategyParams {
    fn slices(&self) -> Vec<&[f64]> {
        let mut s = self.eaus.slices();
        s.extend(self.lt.slices());
        s
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut s = self.eaus.slices_mut();
        s.extend(self.lt.slices_mut());
        s
    }
}

fn check_dim(p: &EausParams, got: usize, op: &'static str) -> Result<()> {
    if got != p.dim() {
        return Err(Error::Dimension {
            op,
            expected: p.dim(),
            got,
        });
    }
    Ok(())
}

/// `<phi(ei), psi(ej)>`.
pub fn relation_coeff(ei: &[f64], ej: &[f64], p: &EausParams) -> Result<f64> {
    check_dim(p, ei.len(), "relation_coeff")?;
    check_dim(p, ej.len(), "relation_coeff")?;
    Ok(dot(&p.phi.forward_unchecked(ei), &p.psi.forward_unchecked(ej)))
}

fn attention_rows(embs: &[Vec<f64>], p: &EausParams) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let proj_p: Vec<Vec<f64>> = embs.iter().map(|e| p.phi.forward_unchecked(e)).collect();
    let proj_q: Vec<Vec<f64>> = embs.iter().map(|e| p.psi.forward_unchecked(e)).collect();
    let rows = proj_p
        .iter()
        .map(|pi| softmax(&proj_q.iter().map(|ql| dot(pi, ql)).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, proj_p, proj_q))
}

fn validate_set(embs: &[Vec<f64>], p: &EausParams) -> Result<()> {
    if embs.is_empty() {
        return Err(Error::EmptyPool);
    }
    for e in embs {
        check_dim(p, e.len(), "eaus embedding")?;
    }
    Ok(())
}

pub fn attention_matrix(pool: &MemoryPool, p: &EausParams) -> Result<AttentionMatrix> {
    let embs = pool.categories();
    validate_set(&embs, p)?;
    Ok(AttentionMatrix {
        weights: attention_rows(&embs, p)?.0,
    })
}

/// Everything [`eaus_backward`] needs from one forward update.
#[derive(Clone, Debug)]
pub struct EausTape {
    embs: Vec<Vec<f64>>,
    mask: Vec<bool>,
    proj_p: Vec<Vec<f64>>,
    proj_q: Vec<Vec<f64>>,
    attention: Vec<Vec<f64>>,
    diffs: Vec<Vec<f64>>,
}

impl EausTape {
    pub fn attention(&self) -> AttentionMatrix {
        AttentionMatrix {
            weights: self.attention.clone(),
        }
    }
}

/// Simultaneous update of a set of embeddings: every `embs[i]` with
/// `mask[i]` moves by `w(e_i - sum_l a_il e_l)`, all terms taken from the
/// input snapshot. Unmasked embeddings still take part in the attention.
pub fn eaus_forward(embs: &[Vec<f64>], mask: &[bool], p: &EausParams) -> Result<(Vec<Vec<f64>>, EausTape)> {
    validate_set(embs, p)?;
    if mask.len() != embs.len() {
        return Err(Error::Dimension {
            op: "eaus mask",
            expected: embs.len(),
            got: mask.len(),
        });
    }
    let (attention, proj_p, proj_q) = attention_rows(embs, p)?;
    let dim = p.dim();
    let mut out = embs.to_vec();
    let mut diffs = vec![Vec::new(); embs.len()];
    for i in 0..embs.len() {
        if !mask[i] {
            continue;
        }
        let mut d = embs[i].clone();
        for (l, e) in embs.iter().enumerate() {
            let a = attention[i][l];
            for k in 0..dim {
                d[k] -= a * e[k];
            }
        }
        add_into(&mut out[i], &p.w.forward_unchecked(&d));
        diffs[i] = d;
    }
    Ok((
        out,
        EausTape {
            embs: embs.to_vec(),
            mask: mask.to_vec(),
            proj_p,
            proj_q,
            attention,
            diffs,
        },
    ))
}

/// Accumulates parameter gradients and returns `dL/d embs`.
pub fn eaus_backward(p: &EausParams, tape: &EausTape, dout: &[Vec<f64>], grads: &mut EausParams) -> Vec<Vec<f64>> {
    let n = tape.embs.len();
    let dim = p.dim();
    let mut de: Vec<Vec<f64>> = dout.to_vec();
    let mut dp = vec![vec![0.0; dim]; n];
    let mut dq = vec![vec![0.0; dim]; n];
    for i in 0..n {
        if !tape.mask[i] {
            continue;
        }
        let u = p.w.backward(&tape.diffs[i], &dout[i], &mut grads.w);
        add_into(&mut de[i], &u);
        let da: Vec<f64> = tape.embs.iter().map(|e| -dot(&u, e)).collect();
        for (l, e) in de.iter_mut().enumerate() {
            let a = tape.attention[i][l];
            for k in 0..dim {
                e[k] -= a * u[k];
            }
        }
        let ds = softmax_backward(&tape.attention[i], &da);
        for l in 0..n {
            for k in 0..dim {
                dp[i][k] += ds[l] * tape.proj_q[l][k];
                dq[l][k] += ds[l] * tape.proj_p[i][k];
            }
        }
    }
    for i in 0..n {
        let from_p = p.phi.backward(&tape.embs[i], &dp[i], &mut grads.phi);
        let from_q = p.psi.backward(&tape.embs[i], &dq[i], &mut grads.psi);
        add_into(&mut de[i], &from_p);
        add_into(&mut de[i], &from_q);
    }
    de
}

fn trace_from(pool: &MemoryPool, before: &[Vec<f64>], after: &[Vec<f64>], attention: Option<AttentionMatrix>) -> UpdateTrace {
    UpdateTrace {
        class_ids: pool.class_ids(),
        displacements: before
            .iter()
            .zip(after)
            .map(|(b, a)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect(),
        attention,
    }
}

/// Updates every category embedding of the pool from one snapshot.
pub fn adaptive_update(pool: &MemoryPool, p: &EausParams) -> Result<(MemoryPool, UpdateTrace)> {
    let before = pool.categories();
    let (after, tape) = eaus_forward(&before, &vec![true; before.len()], p)?;
    let trace = trace_from(pool, &before, &after, Some(tape.attention()));
    let mut next = pool.clone();
    next.set_categories(after)?;
    Ok((next, trace))
}

/// Folds one more shot of an already stored class into its category
/// embedding. The shot joins the attention as a temporary same-class entry;
/// other classes push the embedding away (`e_i - e_j`) while same-class
/// entries pull it in (`e_l - e_i`). Only the stored record changes.
pub fn kshot_absorb(pool: &MemoryPool, class_id: ClassId, new_ec: &Embedding, p: &EausParams) -> Result<MemoryPool> {
    let i = pool.index_of(class_id).ok_or(Error::UnknownClass(class_id))?;
    check_dim(p, new_ec.dim(), "kshot_absorb")?;
    let mut embs = pool.categories();
    embs.push(new_ec.as_slice().to_vec());
    let temp = embs.len() - 1;
    let pi = p.phi.forward_unchecked(&embs[i]);
    let logits: Vec<f64> = embs.iter().map(|e| dot(&pi, &p.psi.forward_unchecked(e))).collect();
    let a = softmax(&logits)?;
    let dim = p.dim();
    let mut v = vec![0.0; dim];
    for (l, e) in embs.iter().enumerate() {
        let same = l == i || l == temp;
        for k in 0..dim {
            let sub = if same { e[k] - embs[i][k] } else { embs[i][k] - e[k] };
            v[k] += a[l] * sub;
        }
    }
    let mut updated = embs[i].clone();
    add_into(&mut updated, &p.w.forward_unchecked(&v));
    let mut next = pool.clone();
    next.set_category(i, updated)?;
    Ok(next)
}

/// Records the strategy should modify in the given session.
pub fn scope_mask(pool: &MemoryPool, scope: UpdateScope, session: u32) -> Vec<bool> {
    pool.records().iter().map(|r| scope.includes(r.session_id(), session)).collect()
}

/// Forward record of [`strategy_forward`].
#[derive(Clone, Debug)]
pub enum StrategyTape {
    Identity,
    Linear { input: Vec<Vec<f64>>, mask: Vec<bool> },
    Eaus(EausTape),
}

/// One application of an update strategy to a set of embeddings.
pub fn strategy_forward(
    embs: &[Vec<f64>],
    mask: &[bool],
    kind: UpdateKind,
    params: &StrategyParams,
) -> Result<(Vec<Vec<f64>>, StrategyTape)> {
    match kind {
        UpdateKind::NonUpdate => Ok((embs.to_vec(), StrategyTape::Identity)),
        UpdateKind::LinearTransform => {
            let out = embs
                .iter()
                .zip(mask)
                .map(|(e, &m)| if m { params.lt.forward(e) } else { Ok(e.clone()) })
                .collect::<Result<Vec<_>>>()?;
            Ok((
                out,
                StrategyTape::Linear {
                    input: embs.to_vec(),
                    mask: mask.to_vec(),
                },
            ))
        }
        UpdateKind::Eaus => {
            let (out, tape) = eaus_forward(embs, mask, &params.eaus)?;
            Ok((out, StrategyTape::Eaus(tape)))
        }
    }
}

pub fn strategy_backward(
    params: &StrategyParams,
    tape: &StrategyTape,
    dout: &[Vec<f64>],
    grads: &mut StrategyParams,
) -> Vec<Vec<f64>> {
    match tape {
        StrategyTape::Identity => dout.to_vec(),
        StrategyTape::Linear { input, mask } => input
            .iter()
            .zip(mask)
            .zip(dout)
            .map(|((x, &m), g)| if m { params.lt.backward(x, g, &mut grads.lt) } else { g.clone() })
            .collect(),
        StrategyTape::Eaus(t) => eaus_backward(&params.eaus, t, dout, &mut grads.eaus),
    }
}

/// Applies a strategy to the pool during `session`.
pub fn apply_strategy(
    pool: &MemoryPool,
    strategy: UpdateStrategy,
    params: &StrategyParams,
    session: u32,
) -> Result<(MemoryPool, UpdateTrace)> {
    if pool.is_empty() {
        return Ok((pool.clone(), trace_from(pool, &[], &[], None)));
    }
    let mask = scope_mask(pool, strategy.scope, session);
    let mut next = pool.clone();
    let mut trace = None;
    if matches!(strategy.target, UpdateTarget::Category | UpdateTarget::Both) {
        let before = pool.categories();
        let (after, tape) = strategy_forward(&before, &mask, strategy.kind, params)?;
        let attention = match &tape {
            StrategyTape::Eaus(t) => Some(t.attention()),
            _ => None,
        };
        trace = Some(trace_from(pool, &before, &after, attention));
        if strategy.kind != UpdateKind::NonUpdate {
            next.set_categories(after)?;
        }
    }
    if matches!(strategy.target, UpdateTarget::Hyper | UpdateTarget::Both) {
        if !pool.hyper_is_mutable() {
            return Err(Error::Invalid(format!("strategy target {:?} needs mutable hyper-class embeddings", strategy.target)));
        }
        let before = pool.hypers();
        let (after, _) = strategy_forward(&before, &mask, strategy.kind, params)?;
        if trace.is_none() {
            trace = Some(trace_from(pool, &before, &after, None));
        }
        if strategy.kind != UpdateKind::NonUpdate {
            next.set_hypers(after)?;
        }
    }
    Ok((next, trace.expect("target selects at least one embedding")))
}
