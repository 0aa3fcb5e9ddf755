//! Pseudo-precision algebra for partially observed Gaussian messages.
//!
//! A pseudo-precision assigns every trait coordinate one of three classes:
//! exactly observed (`Infinite`), informative with a finite precision block
//! (`Finite`), or uninformative (`Zero`). Cross terms between classes are
//! zero by construction, so the matrix is fully described by the class
//! labels plus the symmetric positive-definite block over `Finite`
//! coordinates. Infinite precision is never stored as a float: it is
//! eliminated symbolically by [`branch_deflate`] before any density or
//! determinant is evaluated.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{self, Scratch};
use crate::likelihood::{message_from_flat, FlatBuf};
use crate::linalg::{self, LN_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrecisionClass {
    Infinite,
    Finite,
    Zero,
}

/// Condition number beyond which a finite block is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoPrecision {
    classes: Vec<PrecisionClass>,
    /// Block over the `Finite` coordinates, in increasing coordinate order.
    finite_block: DMatrix<f64>,
}

impl PseudoPrecision {
    pub fn new(classes: Vec<PrecisionClass>, finite_block: DMatrix<f64>) -> Result<Self> {
        let n_finite = classes.iter().filter(|c| **c == PrecisionClass::Finite).count();
        if finite_block.shape() != (n_finite, n_finite) {
            return Err(Error::DimensionMismatch(format!(
                "{n_finite} finite coordinates but block is {:?}",
                finite_block.shape()
            )));
        }
        Ok(PseudoPrecision { classes, finite_block })
    }

    pub fn zero(q: usize) -> Self {
        PseudoPrecision { classes: vec![PrecisionClass::Zero; q], finite_block: DMatrix::zeros(0, 0) }
    }

    /// Infinite where `observed`, Zero elsewhere.
    pub fn exact(observed: &[bool]) -> Self {
        let classes = observed
            .iter()
            .map(|&o| if o { PrecisionClass::Infinite } else { PrecisionClass::Zero })
            .collect();
        PseudoPrecision { classes, finite_block: DMatrix::zeros(0, 0) }
    }

    /// Finite where `support` holds, with the given block over those coordinates.
    pub fn finite_on(support: &[bool], block: DMatrix<f64>) -> Result<Self> {
        let classes = support
            .iter()
            .map(|&s| if s { PrecisionClass::Finite } else { PrecisionClass::Zero })
            .collect();
        PseudoPrecision::new(classes, block)
    }

    pub fn dim(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[PrecisionClass] {
        &self.classes
    }

    pub fn finite_block(&self) -> &DMatrix<f64> {
        &self.finite_block
    }

    /// Number of informative (non-Zero) coordinates.
    pub fn effective_dim(&self) -> usize {
        self.classes.iter().filter(|c| **c != PrecisionClass::Zero).count()
    }

    pub fn has_infinite(&self) -> bool {
        self.classes.contains(&PrecisionClass::Infinite)
    }

    pub fn support(&self) -> Vec<bool> {
        self.classes.iter().map(|c| *c != PrecisionClass::Zero).collect()
    }

    pub fn support_indices(&self) -> Vec<usize> {
        indices(&self.classes, |c| c != PrecisionClass::Zero)
    }

    pub fn finite_indices(&self) -> Vec<usize> {
        indices(&self.classes, |c| c == PrecisionClass::Finite)
    }

    /// The q×q matrix with the finite block scattered in and zeros elsewhere.
    pub fn embedded(&self) -> Result<DMatrix<f64>> {
        if self.has_infinite() {
            return Err(Error::InfiniteLabel);
        }
        let q = self.dim();
        let idx = self.finite_indices();
        let mut out = DMatrix::zeros(q, q);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                out[(i, j)] = self.finite_block[(a, b)];
            }
        }
        Ok(out)
    }
}

fn indices(classes: &[PrecisionClass], keep: impl Fn(PrecisionClass) -> bool) -> Vec<usize> {
    classes.iter().enumerate().filter(|(_, c)| keep(**c)).map(|(i, _)| i).collect()
}

fn checked_inverse(block: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if block.nrows() == 0 {
        return Ok(block.clone());
    }
    let inv = match block.clone().cholesky() {
        Some(ch) => {
            let mut inv = ch.inverse();
            linalg::symmetrize(&mut inv);
            inv
        }
        None => return Err(Error::IllConditioned(f64::INFINITY)),
    };
    // 1-norm condition number; within a factor q of the spectral one
    let cond = linalg::norm_1(block) * linalg::norm_1(&inv);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::IllConditioned(cond));
    }
    Ok(inv)
}

/// Swaps Infinite and Zero labels and inverts the finite block. An involution.
pub fn pseudo_inverse(p: &PseudoPrecision) -> Result<PseudoPrecision> {
    let classes = p
        .classes
        .iter()
        .map(|c| match c {
            PrecisionClass::Infinite => PrecisionClass::Zero,
            PrecisionClass::Zero => PrecisionClass::Infinite,
            PrecisionClass::Finite => PrecisionClass::Finite,
        })
        .collect();
    Ok(PseudoPrecision { classes, finite_block: checked_inverse(&p.finite_block)? })
}

/// Log of the product of the non-zero singular values.
pub fn pseudo_log_det(p: &PseudoPrecision) -> Result<f64> {
    if p.has_infinite() {
        return Err(Error::InfiniteLabel);
    }
    if p.finite_block.nrows() == 0 {
        return Ok(0.0);
    }
    linalg::spd_log_det(&p.finite_block, "finite precision block")
}

/// Log-density of the possibly degenerate normal with pseudo-precision `p`;
/// Zero coordinates do not contribute.
pub fn degenerate_log_density(x: &DVector<f64>, mean: &DVector<f64>, p: &PseudoPrecision) -> Result<f64> {
    if x.len() != p.dim() || mean.len() != p.dim() {
        return Err(Error::DimensionMismatch(format!(
            "x has {}, mean {}, precision {} coordinates",
            x.len(),
            mean.len(),
            p.dim()
        )));
    }
    let ld = pseudo_log_det(p)?;
    let idx = p.finite_indices();
    let r = DVector::from_fn(idx.len(), |a, _| x[idx[a]] - mean[idx[a]]);
    let quad = (r.transpose() * &p.finite_block * &r)[(0, 0)];
    Ok(0.5 * ld - 0.5 * idx.len() as f64 * LN_2PI - 0.5 * quad)
}

/// Partial likelihood of the data below a node, as a function of that node's value:
/// `exp(log_remainder) * φ(x; mean, precision)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub log_remainder: f64,
    /// Entries at Zero coordinates are 0.
    pub mean: DVector<f64>,
    pub precision: PseudoPrecision,
}

impl Message {
    pub fn empty(q: usize) -> Self {
        Message { log_remainder: 0.0, mean: DVector::zeros(q), precision: PseudoPrecision::zero(q) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Coordinates with any data below the node.
    pub fn support(&self) -> Vec<bool> {
        self.precision.support()
    }
}

/// A message after crossing a branch, with the log pseudo-determinant of its
/// precision kept from the factorization that produced it.
#[derive(Debug, Clone)]
pub struct Deflated {
    pub message: Message,
    pub log_det: f64,
}

/// Carries a message across a branch of length `t`: Q = (P⁻ + tΣ)⁻ with ⁻ the
/// pseudo-inverse. On the informative coordinates Q = T⁻¹ with
/// `T = tΣ + diag(0, B⁻¹)`, observed coordinates first, then finite ones.
pub fn branch_deflate(msg: &Message, t: f64, sigma: &DMatrix<f64>) -> Result<Message> {
    Ok(deflate(msg, t, sigma)?.message)
}

pub fn deflate(msg: &Message, t: f64, sigma: &DMatrix<f64>) -> Result<Deflated> {
    let q = msg.dim();
    if sigma.shape() != (q, q) {
        return Err(Error::DimensionMismatch(format!("sigma is {:?}, message has {q} traits", sigma.shape())));
    }
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!("branch length {t} must be positive")));
    }
    let input = FlatBuf::from_message(msg)?;
    let mut out = FlatBuf::new(q);
    let mut s = Scratch::new(q);
    let sigma_rows = sigma.transpose();
    let log_det = kernel::deflate(&input.as_ref(), t, sigma_rows.as_slice(), q, &mut out.as_mut(), &mut s)?;
    out.log_r = msg.log_remainder;
    Ok(Deflated { message: message_from_flat(&out.as_ref()), log_det })
}

/// Product of two deflated child messages as a function of the parent value.
pub fn combine_deflated(a: &Deflated, b: &Deflated) -> Result<Message> {
    let q = a.message.dim();
    if b.message.dim() != q {
        return Err(Error::DimensionMismatch("children disagree on trait count".into()));
    }
    let fa = FlatBuf::from_message(&a.message)?;
    let fb = FlatBuf::from_message(&b.message)?;
    let mut out = FlatBuf::new(q);
    let mut s = Scratch::new(q);
    out.log_r = kernel::combine(&fa.as_ref(), a.log_det, &fb.as_ref(), b.log_det, q, &mut out.as_mut(), &mut s)?;
    Ok(message_from_flat(&out.as_ref()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use PrecisionClass::*;

    fn block(rows: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, rows, data)
    }

    #[test]
    fn pseudo_inverse_examples() {
        let p = PseudoPrecision::new(vec![Infinite, Finite, Zero], block(1, &[2.0])).unwrap();
        let inv = pseudo_inverse(&p).unwrap();
        assert_eq!(inv.classes(), &[Zero, Finite, Infinite]);
        assert_abs_diff_eq!(inv.finite_block()[(0, 0)], 0.5, epsilon = 1e-15);

        let id = PseudoPrecision::new(vec![Finite; 3], DMatrix::identity(3, 3)).unwrap();
        assert_eq!(pseudo_inverse(&id).unwrap(), id);

        let p = PseudoPrecision::new(vec![Finite, Finite], block(2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let inv = pseudo_inverse(&p).unwrap();
        let expect = block(2, &[2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0]);
        assert!((inv.finite_block() - expect).amax() < 1e-15);
    }

    #[test]
    fn pseudo_inverse_rejects_ill_conditioned() {
        let p = PseudoPrecision::new(vec![Finite, Finite], block(2, &[1.0, 0.0, 0.0, 1e-14])).unwrap();
        assert!(matches!(pseudo_inverse(&p), Err(Error::IllConditioned(_))));
    }

    #[test]
    fn pseudo_det_examples() {
        let p = PseudoPrecision::new(vec![Finite, Finite, Zero], block(2, &[2.0, 0.0, 0.0, 0.5])).unwrap();
        assert_abs_diff_eq!(pseudo_log_det(&p).unwrap(), 0.0, epsilon = 1e-15);
        assert_eq!(pseudo_log_det(&PseudoPrecision::zero(3)).unwrap(), 0.0);
        let p = PseudoPrecision::new(vec![Finite, Finite], block(2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert_abs_diff_eq!(pseudo_log_det(&p).unwrap(), 3f64.ln(), epsilon = 1e-14);
        let inf = PseudoPrecision::exact(&[true, false]);
        assert!(matches!(pseudo_log_det(&inf), Err(Error::InfiniteLabel)));
    }

    #[test]
    fn degenerate_density_examples() {
        let x = DVector::from_vec(vec![0.3]);
        let p = PseudoPrecision::new(vec![Finite], block(1, &[1.0])).unwrap();
        assert_abs_diff_eq!(degenerate_log_density(&x, &x, &p).unwrap(), -0.5 * LN_2PI, epsilon = 1e-15);
        let z = PseudoPrecision::zero(2);
        let v = DVector::from_vec(vec![5.0, -1.0]);
        assert_eq!(degenerate_log_density(&v, &DVector::zeros(2), &z).unwrap(), 0.0);
        // scalar normal with variance 2 evaluated two units from its mean
        let p = PseudoPrecision::new(vec![Finite], block(1, &[0.5])).unwrap();
        let expect = -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln() - 4.0 / (2.0 * 2.0);
        let got = degenerate_log_density(&DVector::from_vec(vec![2.0]), &DVector::zeros(1), &p).unwrap();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-14);
        assert_abs_diff_eq!(got, -2.2655, epsilon = 1e-4);
        assert!(degenerate_log_density(&DVector::zeros(2), &DVector::zeros(1), &p).is_err());
    }

    #[test]
    fn deflation_examples() {
        let sigma = block(1, &[1.0]);
        let tip = Message {
            log_remainder: 0.0,
            mean: DVector::from_vec(vec![1.5]),
            precision: PseudoPrecision::exact(&[true]),
        };
        let d = branch_deflate(&tip, 2.0, &sigma).unwrap();
        assert_eq!(d.precision.classes(), &[Finite]);
        assert_abs_diff_eq!(d.precision.finite_block()[(0, 0)], 0.5, epsilon = 1e-15);
        assert_eq!(d.mean, tip.mean);

        let missing = Message::empty(1);
        assert_eq!(branch_deflate(&missing, 3.0, &block(1, &[7.0])).unwrap(), missing);

        let latent = Message {
            log_remainder: -1.0,
            mean: DVector::from_vec(vec![0.2]),
            precision: PseudoPrecision::new(vec![Finite], block(1, &[4.0])).unwrap(),
        };
        let d = branch_deflate(&latent, 1.0, &sigma).unwrap();
        assert_abs_diff_eq!(d.precision.finite_block()[(0, 0)], 0.8, epsilon = 1e-15);
        assert_eq!(d.log_remainder, -1.0);
    }

    #[test]
    fn deflation_mixed_classes_matches_limit() {
        // Infinite coordinate approximated by a huge finite precision
        let sigma = block(3, &[2.0, 0.5, 0.3, 0.5, 1.0, 0.2, 0.3, 0.2, 1.5]);
        let exact = Message {
            log_remainder: 0.0,
            mean: DVector::from_vec(vec![1.0, 2.0, 0.0]),
            precision: PseudoPrecision::new(vec![Infinite, Finite, Zero], block(1, &[3.0])).unwrap(),
        };
        let approx = Message {
            log_remainder: 0.0,
            mean: exact.mean.clone(),
            precision: PseudoPrecision::new(vec![Finite, Finite, Zero], block(2, &[1e9, 0.0, 0.0, 3.0]))
                .unwrap(),
        };
        let a = branch_deflate(&exact, 0.7, &sigma).unwrap();
        let b = branch_deflate(&approx, 0.7, &sigma).unwrap();
        assert!((a.precision.finite_block() - b.precision.finite_block()).amax() < 1e-7);
        assert_eq!(a.precision.classes(), &[Finite, Finite, Zero]);
    }

    fn deflated(mean: f64, prec: f64) -> Deflated {
        let p = PseudoPrecision::new(vec![Finite], block(1, &[prec])).unwrap();
        Deflated {
            log_det: prec.ln(),
            message: Message { log_remainder: 0.0, mean: DVector::from_vec(vec![mean]), precision: p },
        }
    }

    #[test]
    fn combine_two_gaussians() {
        let a = deflated(1.0, 0.5);
        let b = deflated(3.0, 0.5);
        let p = combine_deflated(&a, &b).unwrap();
        assert_abs_diff_eq!(p.precision.finite_block()[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.mean[0], 2.0, epsilon = 1e-15);
        // product of N(x;1,2) and N(x;3,2) leaves N(1;3,4) as the constant
        let oracle = -0.5 * (2.0 * std::f64::consts::PI * 4.0).ln() - 0.5 * 4.0 / 4.0;
        assert_abs_diff_eq!(p.log_remainder, oracle, epsilon = 1e-14);
        assert_abs_diff_eq!(p.log_remainder, -2.1121, epsilon = 1e-4);
    }

    #[test]
    fn combine_with_empty_sibling() {
        let a = deflated(1.0, 0.5);
        let empty = Deflated { message: Message::empty(1), log_det: 0.0 };
        let p = combine_deflated(&a, &empty).unwrap();
        assert_eq!(p.precision, a.message.precision);
        assert_abs_diff_eq!(p.mean[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.log_remainder, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn combine_disjoint_supports() {
        let a = Deflated {
            log_det: 2f64.ln(),
            message: Message {
                log_remainder: 0.0,
                mean: DVector::from_vec(vec![1.0, 0.0]),
                precision: PseudoPrecision::new(vec![Finite, Zero], block(1, &[2.0])).unwrap(),
            },
        };
        let b = Deflated {
            log_det: 3f64.ln(),
            message: Message {
                log_remainder: 0.0,
                mean: DVector::from_vec(vec![0.0, -4.0]),
                precision: PseudoPrecision::new(vec![Zero, Finite], block(1, &[3.0])).unwrap(),
            },
        };
        let p = combine_deflated(&a, &b).unwrap();
        assert_eq!(p.precision.finite_block(), &block(2, &[2.0, 0.0, 0.0, 3.0]));
        assert_abs_diff_eq!(p.mean, DVector::from_vec(vec![1.0, -4.0]), epsilon = 1e-14);
        assert_abs_diff_eq!(p.log_remainder, 0.0, epsilon = 1e-14);
    }
}
