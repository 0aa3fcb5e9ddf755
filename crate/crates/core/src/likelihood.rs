//! Post-order observed-data log-likelihood, O(N q³) per evaluation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{combine_deflated, deflate, Message, PrecisionClass, PseudoPrecision};
use crate::kernel::{self, FlatMut, FlatRef, Scratch};
use crate::linalg;
use crate::traits::TraitMatrix;
use crate::tree::{NodeId, Phylogeny};

/// Brownian diffusion with covariance `sigma` per unit time and root prior
/// MVN(`root_mean`, `sigma` / `root_sample_size`).
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    sigma: DMatrix<f64>,
    root_mean: DVector<f64>,
    root_sample_size: f64,
}

impl DiffusionModel {
    pub fn new(sigma: DMatrix<f64>, root_mean: DVector<f64>, root_sample_size: f64) -> Result<Self> {
        let sigma = linalg::validate_spd(&sigma, "sigma")?;
        if root_mean.len() != sigma.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "root mean has {} entries, sigma is {}x{}",
                root_mean.len(),
                sigma.nrows(),
                sigma.nrows()
            )));
        }
        if !(root_sample_size > 0.0 && root_sample_size.is_finite()) {
            return Err(Error::InvalidParameter(format!("kappa = {root_sample_size} must be positive")));
        }
        Ok(DiffusionModel { sigma, root_mean, root_sample_size })
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn root_mean(&self) -> &DVector<f64> {
        &self.root_mean
    }

    pub fn kappa(&self) -> f64 {
        self.root_sample_size
    }

    pub fn n_traits(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn with_sigma(&self, sigma: DMatrix<f64>) -> Result<Self> {
        DiffusionModel::new(sigma, self.root_mean.clone(), self.root_sample_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    Degenerate,
    Residual,
}

/// How tip data relate to the tip's latent trait value.
#[derive(Debug, Clone)]
pub enum TipLink {
    /// Data equal the latent value.
    Degenerate,
    /// Data ~ MVN(latent, precision⁻¹).
    Residual { precision: DMatrix<f64> },
}

impl TipLink {
    pub fn residual(precision: DMatrix<f64>) -> Result<Self> {
        Ok(TipLink::Residual { precision: linalg::validate_spd(&precision, "residual precision")? })
    }

    pub fn kind(&self) -> LinkKind {
        match self {
            TipLink::Degenerate => LinkKind::Degenerate,
            TipLink::Residual { .. } => LinkKind::Residual,
        }
    }

    pub fn residual_precision(&self) -> Option<&DMatrix<f64>> {
        match self {
            TipLink::Degenerate => None,
            TipLink::Residual { precision } => Some(precision),
        }
    }
}

/// Hash of the parameter values a post-order pass was computed with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterStamp(u64);

impl ParameterStamp {
    pub fn of(model: &DiffusionModel, link: &TipLink) -> Self {
        // FNV-1a over the bit patterns
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: f64| {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        model.sigma.iter().for_each(|&v| eat(v));
        model.root_mean.iter().for_each(|&v| eat(v));
        eat(model.root_sample_size);
        match link {
            TipLink::Degenerate => eat(-1.0),
            TipLink::Residual { precision } => precision.iter().for_each(|&v| eat(v)),
        }
        ParameterStamp(h)
    }
}

/// Per-node messages of a post-order pass in flat storage.
#[derive(Debug, Clone)]
pub(crate) struct MessageStore {
    q: usize,
    classes: Vec<PrecisionClass>,
    mean: Vec<f64>,
    block: Vec<f64>,
    log_r: Vec<f64>,
}

impl MessageStore {
    fn new(n_nodes: usize, q: usize) -> Self {
        MessageStore {
            q,
            classes: vec![PrecisionClass::Zero; n_nodes * q],
            mean: vec![0.0; n_nodes * q],
            block: vec![0.0; n_nodes * q * q],
            log_r: vec![0.0; n_nodes],
        }
    }

    pub(crate) fn get(&self, k: NodeId) -> FlatRef<'_> {
        let q = self.q;
        FlatRef {
            classes: &self.classes[k * q..(k + 1) * q],
            mean: &self.mean[k * q..(k + 1) * q],
            block: &self.block[k * q * q..(k + 1) * q * q],
            log_r: self.log_r[k],
        }
    }

    fn get_mut(&mut self, k: NodeId) -> (FlatMut<'_>, &mut f64) {
        let q = self.q;
        (
            FlatMut {
                classes: &mut self.classes[k * q..(k + 1) * q],
                mean: &mut self.mean[k * q..(k + 1) * q],
                block: &mut self.block[k * q * q..(k + 1) * q * q],
            },
            &mut self.log_r[k],
        )
    }
}

/// Owned flat buffers for one message.
pub(crate) struct FlatBuf {
    pub classes: Vec<PrecisionClass>,
    pub mean: Vec<f64>,
    pub block: Vec<f64>,
    pub log_r: f64,
}

impl FlatBuf {
    pub(crate) fn new(q: usize) -> Self {
        FlatBuf {
            classes: vec![PrecisionClass::Zero; q],
            mean: vec![0.0; q],
            block: vec![0.0; q * q],
            log_r: 0.0,
        }
    }

    pub(crate) fn from_message(msg: &Message) -> Result<Self> {
        let q = msg.dim();
        let mut out = FlatBuf::new(q);
        out.classes.copy_from_slice(msg.precision.classes());
        out.mean.copy_from_slice(msg.mean.as_slice());
        let idx = msg.precision.finite_indices();
        let b = msg.precision.finite_block();
        for (x, &i) in idx.iter().enumerate() {
            for (y, &j) in idx.iter().enumerate() {
                out.block[i * q + j] = b[(x, y)];
            }
        }
        out.log_r = msg.log_remainder;
        Ok(out)
    }

    pub(crate) fn as_ref(&self) -> FlatRef<'_> {
        FlatRef { classes: &self.classes, mean: &self.mean, block: &self.block, log_r: self.log_r }
    }

    pub(crate) fn as_mut(&mut self) -> FlatMut<'_> {
        FlatMut { classes: &mut self.classes, mean: &mut self.mean, block: &mut self.block }
    }
}

pub(crate) fn message_from_flat(m: &FlatRef) -> Message {
    let q = m.classes.len();
    let idx: Vec<usize> = (0..q).filter(|&k| m.classes[k] == PrecisionClass::Finite).collect();
    let block = DMatrix::from_fn(idx.len(), idx.len(), |x, y| m.block[idx[x] * q + idx[y]]);
    Message {
        log_remainder: m.log_r,
        mean: DVector::from_column_slice(m.mean),
        precision: PseudoPrecision::new(m.classes.to_vec(), block).expect("block matches finite labels"),
    }
}

/// Tip initialization holding the residual variance Γ⁻¹ once per pass.
pub(crate) struct TipInit<'a> {
    q: usize,
    residual_precision: Option<&'a DMatrix<f64>>,
    residual_variance: Option<DMatrix<f64>>,
}

impl<'a> TipInit<'a> {
    pub(crate) fn new(link: &'a TipLink, q: usize) -> Result<Self> {
        Ok(match link {
            TipLink::Degenerate => TipInit { q, residual_precision: None, residual_variance: None },
            TipLink::Residual { precision } => TipInit {
                q,
                residual_precision: Some(precision),
                residual_variance: Some(linalg::spd_inverse(precision, "residual precision")?),
            },
        })
    }

    /// Writes the message of tip `i` into `out`.
    pub(crate) fn write(&self, tm: &TraitMatrix, i: usize, out: &mut FlatMut, s: &mut Scratch) -> Result<()> {
        let q = self.q;
        let mask = tm.row_mask(i);
        let values = tm.values();
        out.block.iter_mut().for_each(|v| *v = 0.0);
        s.idx.clear();
        for j in 0..q {
            out.mean[j] = if mask[j] { values[(i, j)] } else { 0.0 };
            if mask[j] {
                s.idx.push(j);
            }
        }
        match (self.residual_precision, &self.residual_variance) {
            (Some(gamma), Some(var)) => {
                for j in 0..q {
                    out.classes[j] = if mask[j] { PrecisionClass::Finite } else { PrecisionClass::Zero };
                }
                let o = s.idx.len();
                if o == q {
                    out.block.copy_from_slice(gamma.transpose().as_slice());
                } else if o > 0 {
                    // marginal precision of the observed sub-vector
                    for x in 0..o {
                        for y in 0..o {
                            s.a[x * o + y] = var[(s.idx[x], s.idx[y])];
                        }
                    }
                    if !kernel::cholesky_in_place(&mut s.a[..o * o], o) {
                        return Err(Error::NotPositiveDefinite("residual variance block".into()));
                    }
                    kernel::chol_inverse(&s.a[..o * o], o, &mut s.b[..o * o]);
                    for x in 0..o {
                        for y in 0..o {
                            out.block[s.idx[x] * q + s.idx[y]] = s.b[x * o + y];
                        }
                    }
                }
            }
            _ => {
                for j in 0..q {
                    out.classes[j] = if mask[j] { PrecisionClass::Infinite } else { PrecisionClass::Zero };
                }
            }
        }
        Ok(())
    }
}

/// Message at tip `i` before crossing its branch.
pub fn init_tip_message(tm: &TraitMatrix, i: usize, link: &TipLink) -> Result<Message> {
    let q = tm.n_traits();
    let mut buf = FlatBuf::new(q);
    let mut s = Scratch::new(q);
    TipInit::new(link, q)?.write(tm, i, &mut buf.as_mut(), &mut s)?;
    Ok(message_from_flat(&buf.as_ref()))
}

/// Deflates both children across their branches and multiplies them.
pub fn combine_children(
    msg_a: &Message,
    msg_b: &Message,
    t_a: f64,
    t_b: f64,
    sigma: &DMatrix<f64>,
) -> Result<Message> {
    let a = deflate(msg_a, t_a, sigma)?;
    let b = deflate(msg_b, t_b, sigma)?;
    combine_deflated(&a, &b)
}

/// Full conditional of the root value given all observed data.
#[derive(Debug, Clone)]
pub struct RootPosterior {
    pub precision: DMatrix<f64>,
    pub mean: DVector<f64>,
}

fn flat_root(
    msg: &FlatRef,
    model: &DiffusionModel,
    sigma_inv: &DMatrix<f64>,
    s: &mut Scratch,
) -> Result<(f64, RootPosterior)> {
    let q = model.n_traits();
    let si = sigma_inv.transpose();
    let ld_sigma_inv = linalg::spd_log_det(sigma_inv, "sigma inverse")?;
    let r = kernel::integrate_root(msg, model.root_mean().as_slice(), model.kappa(), si.as_slice(), ld_sigma_inv, q, s)?;
    Ok((
        r.log_likelihood,
        RootPosterior { precision: DMatrix::from_row_slice(q, q, &r.precision), mean: DVector::from_vec(r.mean) },
    ))
}

/// Integrates the root message against the root prior.
pub fn root_integrate(msg_root: &Message, model: &DiffusionModel) -> Result<f64> {
    let sigma_inv = linalg::spd_inverse(model.sigma(), "sigma")?;
    let flat = FlatBuf::from_message(msg_root)?;
    let mut s = Scratch::new(model.n_traits());
    Ok(flat_root(&flat.as_ref(), model, &sigma_inv, &mut s)?.0)
}

/// Everything the post-order pass produces, kept for the pre-order sampler.
#[derive(Debug, Clone)]
pub struct PostOrderPass {
    pub(crate) store: MessageStore,
    pub root: RootPosterior,
    pub log_likelihood: f64,
    pub sigma_inv: DMatrix<f64>,
    stamp: ParameterStamp,
}

impl PostOrderPass {
    pub fn stamp(&self) -> ParameterStamp {
        self.stamp
    }

    /// Node `k`'s message before crossing its own branch.
    pub fn message(&self, k: NodeId) -> Message {
        message_from_flat(&self.store.get(k))
    }
}

pub(crate) fn check_aligned(tree: &Phylogeny, tm: &TraitMatrix, q: usize) -> Result<()> {
    if tm.n_taxa() != tree.n_tips() || tm.taxon_names() != tree.tip_labels() {
        return Err(Error::InvalidParameter("trait table is not aligned to the tree tips".into()));
    }
    if tm.n_traits() != q {
        return Err(Error::DimensionMismatch(format!("model has {q} traits, data {}", tm.n_traits())));
    }
    Ok(())
}

pub fn post_order(
    tree: &Phylogeny,
    tm: &TraitMatrix,
    model: &DiffusionModel,
    link: &TipLink,
) -> Result<PostOrderPass> {
    let q = model.n_traits();
    check_aligned(tree, tm, q)?;
    if let TipLink::Residual { precision } = link {
        if precision.nrows() != q {
            return Err(Error::DimensionMismatch("residual precision size".into()));
        }
    }
    tree.check_positive_branches()?;
    let sigma_flat = model.sigma().transpose();
    let sigma_flat = sigma_flat.as_slice();
    let sigma_inv = linalg::spd_inverse(model.sigma(), "sigma")?;
    let init = TipInit::new(link, q)?;
    let mut store = MessageStore::new(tree.n_nodes(), q);
    let mut s = Scratch::new(q);
    let mut da = FlatBuf::new(q);
    let mut db = FlatBuf::new(q);
    for &k in tree.postorder() {
        match tree.children(k) {
            None => {
                let (mut out, log_r) = store.get_mut(k);
                init.write(tm, k, &mut out, &mut s)?;
                *log_r = 0.0;
            }
            Some([a, b]) => {
                let ld_a = kernel::deflate(&store.get(a), tree.branch_length(a), sigma_flat, q, &mut da.as_mut(), &mut s)?;
                da.log_r = store.log_r[a];
                let ld_b = kernel::deflate(&store.get(b), tree.branch_length(b), sigma_flat, q, &mut db.as_mut(), &mut s)?;
                db.log_r = store.log_r[b];
                let (mut out, log_r) = store.get_mut(k);
                *log_r = kernel::combine(&da.as_ref(), ld_a, &db.as_ref(), ld_b, q, &mut out, &mut s)?;
            }
        }
    }
    let (log_likelihood, root) = flat_root(&store.get(tree.root()), model, &sigma_inv, &mut s)?;
    Ok(PostOrderPass { store, root, log_likelihood, sigma_inv, stamp: ParameterStamp::of(model, link) })
}

pub fn log_likelihood(tree: &Phylogeny, tm: &TraitMatrix, model: &DiffusionModel, link: &TipLink) -> Result<f64> {
    Ok(post_order(tree, tm, model, link)?.log_likelihood)
}

/// Count of Infinite/Finite/Zero labels; handy in diagnostics and tests.
pub fn class_counts(p: &PseudoPrecision) -> [usize; 3] {
    let mut out = [0; 3];
    for c in p.classes() {
        out[match c {
            PrecisionClass::Infinite => 0,
            PrecisionClass::Finite => 1,
            PrecisionClass::Zero => 2,
        }] += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::parse_newick;
    use approx::assert_abs_diff_eq;
    use PrecisionClass::*;

    fn table(rows: Vec<Vec<Option<f64>>>, names: &[&str]) -> TraitMatrix {
        let q = rows[0].len();
        TraitMatrix::new(
            names.iter().map(|s| s.to_string()).collect(),
            (0..q).map(|j| format!("t{j}")).collect(),
            rows,
        )
        .unwrap()
    }

    #[test]
    fn tip_initialization() {
        let tm = table(vec![vec![Some(1.2), None], vec![None, None], vec![Some(1.0), Some(2.0)]], &["a", "b", "c"]);
        let m = init_tip_message(&tm, 0, &TipLink::Degenerate).unwrap();
        assert_eq!(m.mean, DVector::from_vec(vec![1.2, 0.0]));
        assert_eq!(m.precision.classes(), &[Infinite, Zero]);
        assert_eq!(m.log_remainder, 0.0);

        let gamma = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let res = TipLink::residual(gamma.clone()).unwrap();
        for link in [&TipLink::Degenerate, &res] {
            let m = init_tip_message(&tm, 1, link).unwrap();
            assert_eq!(m, Message::empty(2));
        }
        let m = init_tip_message(&tm, 2, &res).unwrap();
        assert_eq!(m.precision.classes(), &[Finite, Finite]);
        assert_eq!(m.precision.finite_block(), &gamma);
        assert_eq!(m.mean, DVector::from_vec(vec![1.0, 2.0]));
    }

    #[test]
    fn residual_partial_tip_marginalizes() {
        let tm = table(vec![vec![Some(1.0), None]], &["a"]);
        let gamma = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let m = init_tip_message(&tm, 0, &TipLink::residual(gamma).unwrap()).unwrap();
        // (Γ⁻¹)_11 = 2/3, marginal precision 3/2
        assert_abs_diff_eq!(m.precision.finite_block()[(0, 0)], 1.5, epsilon = 1e-14);
    }

    #[test]
    fn all_missing_is_exactly_zero() {
        let tree = parse_newick("((A:1,B:1):2,C:3);").unwrap();
        let tm = table(vec![vec![None, None]; 3], &["A", "B", "C"]);
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let model = DiffusionModel::new(sigma, DVector::from_vec(vec![0.5, -1.0]), 0.1).unwrap();
        assert_eq!(log_likelihood(&tree, &tm, &model, &TipLink::Degenerate).unwrap(), 0.0);
        let gamma = TipLink::residual(DMatrix::identity(2, 2)).unwrap();
        assert_eq!(log_likelihood(&tree, &tm, &model, &gamma).unwrap(), 0.0);
        assert_eq!(root_integrate(&Message::empty(2), &model).unwrap(), 0.0);
    }

    #[test]
    fn cherry_matches_bivariate_normal() {
        let tree = parse_newick("(A:1,B:1);").unwrap();
        let tm = table(vec![vec![Some(0.0)], vec![Some(0.0)]], &["A", "B"]);
        let model = DiffusionModel::new(DMatrix::identity(1, 1), DVector::zeros(1), 1.0).unwrap();
        let ll = log_likelihood(&tree, &tm, &model, &TipLink::Degenerate).unwrap();
        let expect = -(2.0 * std::f64::consts::PI).ln() - 0.5 * 3f64.ln();
        assert_abs_diff_eq!(ll, expect, epsilon = 1e-13);
        assert_abs_diff_eq!(ll, -2.3872, epsilon = 1e-4);
    }

    #[test]
    fn single_observation_is_univariate_normal() {
        let tree = parse_newick("(A:1.5,B:0.5);").unwrap();
        let tm = table(vec![vec![Some(2.0)], vec![None]], &["A", "B"]);
        let sigma = DMatrix::from_element(1, 1, 0.8);
        let model = DiffusionModel::new(sigma, DVector::from_element(1, 0.5), 2.0).unwrap();
        let ll = log_likelihood(&tree, &tm, &model, &TipLink::Degenerate).unwrap();
        let var = (1.5 + 1.0 / 2.0) * 0.8;
        let expect = -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * (2.0f64 - 0.5).powi(2) / var;
        assert_abs_diff_eq!(ll, expect, epsilon = 1e-13);
    }

    #[test]
    fn combine_children_uninformative_sibling() {
        let sigma = DMatrix::identity(1, 1);
        let tip = Message {
            log_remainder: 0.0,
            mean: DVector::from_vec(vec![1.0]),
            precision: PseudoPrecision::exact(&[true]),
        };
        let p = combine_children(&tip, &Message::empty(1), 2.0, 5.0, &sigma).unwrap();
        assert_abs_diff_eq!(p.precision.finite_block()[(0, 0)], 0.5, epsilon = 1e-15);
        assert_eq!(p.mean[0], 1.0);
        assert_abs_diff_eq!(p.log_remainder, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn rejects_misaligned_and_zero_branches() {
        let tree = parse_newick("(A:1,B:0);").unwrap();
        let tm = table(vec![vec![Some(0.0)], vec![Some(0.0)]], &["A", "B"]);
        let model = DiffusionModel::new(DMatrix::identity(1, 1), DVector::zeros(1), 1.0).unwrap();
        assert!(matches!(
            log_likelihood(&tree, &tm, &model, &TipLink::Degenerate),
            Err(Error::NonPositiveBranchLength { .. })
        ));
        let tree = parse_newick("(B:1,A:1);").unwrap();
        assert!(log_likelihood(&tree, &tm, &model, &TipLink::Degenerate).is_err());
    }

    #[test]
    fn model_validation() {
        assert!(DiffusionModel::new(DMatrix::identity(2, 2), DVector::zeros(1), 1.0).is_err());
        assert!(DiffusionModel::new(DMatrix::identity(2, 2), DVector::zeros(2), 0.0).is_err());
        assert!(DiffusionModel::new(-DMatrix::identity(2, 2), DVector::zeros(2), 1.0).is_err());
        assert!(TipLink::residual(DMatrix::zeros(2, 2)).is_err());
    }
}
