//! Central finite differences as a gradient oracle.

use super::{AdError, NodeId, Tape, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    /// Added to `|analytic|` in the relative-error denominator.
    pub eps_abs: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            eps_abs: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdCoordinate {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// A nondifferentiable point lies within the stencil.
    pub kink: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub coordinates: Vec<FdCoordinate>,
}

impl FdReport {
    /// Largest relative error over coordinates not flagged as kinks.
    pub fn max_rel_error(&self) -> f64 {
        self.coordinates
            .iter()
            .filter(|c| !c.kink)
            .map(|c| c.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn excluded(&self) -> Vec<usize> {
        self.coordinates
            .iter()
            .filter(|c| c.kink)
            .map(|c| c.index)
            .collect()
    }

    /// Fraction of checked (non-kink) coordinates with error below `tol`.
    pub fn fraction_within(&self, tol: f64) -> f64 {
        let checked: Vec<_> = self.coordinates.iter().filter(|c| !c.kink).collect();
        if checked.is_empty() {
            return 1.0;
        }
        checked.iter().filter(|c| c.rel_error < tol).count() as f64 / checked.len() as f64
    }
}

/// Compares `analytic` against central differences of `f` at `point`.
///
/// Each coordinate also gets one-sided differences at steps `h` and `2h`.
/// For a twice-differentiable function the forward/backward gap doubles with
/// the step; a gap that does not scale that way means a kink sits inside the
/// stencil and the coordinate is reported as excluded.
pub fn finite_difference_check<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    opts: FdOptions,
) -> Result<FdReport, AdError>
where
    F: FnMut(&[f64]) -> f64,
{
    let h = opts.step;
    if !(h > 0.0) || !h.is_finite() {
        return Err(AdError::BadStep(h));
    }
    assert_eq!(point.len(), analytic.len(), "one analytic entry per coordinate");
    let mut x = point.to_vec();
    let mut eval = |x: &[f64], coordinate: usize| -> Result<f64, AdError> {
        let value = f(x);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(AdError::NonFinite { coordinate, value })
        }
    };
    let f0 = eval(&x, usize::MAX)?;
    let mut coordinates = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x0 = x[i];
        let mut at = |x: &mut Vec<f64>, d: f64| -> Result<f64, AdError> {
            x[i] = x0 + d;
            let v = eval(x, i);
            x[i] = x0;
            v
        };
        let fp = at(&mut x, h)?;
        let fm = at(&mut x, -h)?;
        let fp2 = at(&mut x, 2.0 * h)?;
        let fm2 = at(&mut x, -2.0 * h)?;

        let numeric = (fp - fm) / (2.0 * h);
        let gap1 = ((fp - f0) - (f0 - fm)) / h;
        let gap2 = ((fp2 - f0) - (f0 - fm2)) / (2.0 * h);
        let floor = 1e-7 * (1.0 + numeric.abs());
        let kink = if gap1.abs() > floor || gap2.abs() > floor {
            let ratio = gap2.abs() / gap1.abs().max(f64::MIN_POSITIVE);
            !(1.8..=2.2).contains(&ratio)
        } else {
            false
        };
        let a = analytic[i];
        coordinates.push(FdCoordinate {
            index: i,
            analytic: a,
            numeric,
            rel_error: (a - numeric).abs() / (a.abs() + opts.eps_abs),
            kink,
        });
    }
    Ok(FdReport { coordinates })
}

/// Gradient check for a function recorded on a tape.
///
/// `build` records a scalar on a fresh tape from the given leaves. The
/// analytic gradient comes from [`Tape::gradient`]; perturbed values are
/// obtained by replaying the recorded forward pass with rebound leaves.
pub fn check_tape_gradient<B>(build: B, leaves: &[Tensor], opts: FdOptions) -> Result<FdReport, AdError>
where
    B: FnOnce(&mut Tape, &[NodeId]) -> Result<NodeId, AdError>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.parameter(t.clone())).collect();
    let target = build(&mut tape, &ids)?;
    let grads = tape.gradient_values(target, &ids)?;

    let shapes: Vec<Vec<usize>> = leaves.iter().map(|t| t.shape().to_vec()).collect();
    let flat_point: Vec<f64> = leaves.iter().flat_map(|t| t.data().iter().copied()).collect();
    let flat_grad: Vec<f64> = grads.iter().flat_map(|t| t.data().iter().copied()).collect();

    let mut replay_err = None;
    let report = finite_difference_check(
        |x| {
            let mut offset = 0;
            let bindings: Vec<(NodeId, Tensor)> = ids
                .iter()
                .zip(&shapes)
                .map(|(&id, s)| {
                    let n: usize = s.iter().product();
                    let t = Tensor::from_vec(s, x[offset..offset + n].to_vec());
                    offset += n;
                    (id, t)
                })
                .collect();
            match tape.forward(&bindings) {
                Ok(()) => tape.value(target).item(),
                Err(e) => {
                    replay_err.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &flat_point,
        &flat_grad,
        opts,
    );
    if let Some(e) = replay_err {
        return Err(e);
    }
    report
}
