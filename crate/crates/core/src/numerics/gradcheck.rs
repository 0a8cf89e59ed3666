//! Central finite differences as an oracle for the tape's gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Fault, Tape, Var};
use super::tensor::Precision;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const REL_ERR_FLOOR: f64 = 1e-12;

/// `|a - n| / max(|a|, |n|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Numeric gradient of one parameter block. `None` marks coordinates whose
/// perturbation crossed a non-differentiable point.
#[derive(Clone, Debug)]
pub struct NumericGrad {
    pub id: ParamId,
    pub values: Vec<Option<f64>>,
}

struct Probe {
    loss: f64,
    kinks: u64,
}

fn probe<F>(f: &mut F, store: &ParamStore) -> Result<Probe>
where
    F: for<'a> FnMut(&mut Tape<'a>) -> Result<Var>,
{
    let mut tape = Tape::new(store, Precision::F64);
    let out = f(&mut tape)?;
    let loss = tape.value(out).item()?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {loss}")));
    }
    Ok(Probe {
        loss,
        kinks: tape.kink_signature(),
    })
}

/// Central differences `(f(θ+h) - f(θ-h)) / 2h` for every coordinate of `ids`.
///
/// Always evaluates in 64-bit. The store is restored exactly afterwards.
pub fn finite_diff_grad<F>(
    mut f: F,
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
) -> Result<Vec<NumericGrad>>
where
    F: for<'a> FnMut(&mut Tape<'a>) -> Result<Var>,
{
    let base = probe(&mut f, store)?;
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.value(id).numel();
        let mut values = Vec::with_capacity(n);
        for k in 0..n {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let plus = probe(&mut f, store);
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let minus = probe(&mut f, store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let (plus, minus) = (plus?, minus?);
            if plus.kinks != base.kinks || minus.kinks != base.kinks {
                values.push(None);
            } else {
                values.push(Some((plus.loss - minus.loss) / (2.0 * h)));
            }
        }
        out.push(NumericGrad { id, values });
    }
    Ok(out)
}

/// Initial step of the Ridders ladder.
pub const RIDDERS_START: f64 = 1e-2;

fn central_at<F>(f: &mut F, store: &mut ParamStore, id: ParamId, k: usize, h: f64, kinks: u64) -> Result<Option<f64>>
where
    F: for<'a> FnMut(&mut Tape<'a>) -> Result<Var>,
{
    let orig = store.value(id).data()[k];
    store.get_mut(id).value.data_mut()[k] = orig + h;
    let plus = probe(f, store);
    store.get_mut(id).value.data_mut()[k] = orig - h;
    let minus = probe(f, store);
    store.get_mut(id).value.data_mut()[k] = orig;
    let (plus, minus) = (plus?, minus?);
    if plus.kinks != kinks || minus.kinks != kinks {
        return Ok(None);
    }
    Ok(Some((plus.loss - minus.loss) / (2.0 * h)))
}

/// One Ridders tableau from `h0`; returns the estimate and its error bound.
fn ridders_at<F>(f: &mut F, store: &mut ParamStore, id: ParamId, k: usize, h0: f64, kinks: u64) -> Result<Option<(f64, f64)>>
where
    F: for<'a> FnMut(&mut Tape<'a>) -> Result<Var>,
{
    const CON: f64 = 1.4;
    const CON2: f64 = CON * CON;
    const LEVELS: usize = 10;
    const SAFE: f64 = 2.0;
    let mut prev: Vec<f64> = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    let mut last = None;
    let mut h = h0;
    for _ in 0..LEVELS {
        // A kink inside the ladder makes every extrapolation suspect.
        let Some(d) = central_at(f, store, id, k, h, kinks)? else {
            return Ok(None);
        };
        h /= CON;
        last = Some(d);
        let mut row = vec![d];
        let mut fac = CON2;
        for j in 1..=prev.len() {
            let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= CON2;
            let e = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs());
            if best.map_or(true, |(_, err)| e <= err) {
                best = Some((v, e));
            }
            row.push(v);
        }
        let err = best.map_or(f64::INFINITY, |(_, e)| e);
        let diverging = !prev.is_empty() && (row[prev.len()] - prev[prev.len() - 1]).abs() >= SAFE * err;
        prev = row;
        if diverging {
            break;
        }
    }
    Ok(best.or(last.map(|d| (d, f64::INFINITY))))
}

/// Ridders' extrapolation over central differences with steps `h / 1.4^i`.
///
/// Rounding noise in a plain central difference is about `eps * |f| / h`,
/// which swamps coordinates whose gradient is many orders below the loss.
/// Extrapolating from larger steps removes the truncation error instead of
/// shrinking `h`. Each coordinate runs tableaux from `h0`, `10 * h0` and
/// `100 * h0` and keeps the estimate with the smaller error bound; the larger
/// start resolves gradients near 1e-10 on O(1) losses. A tableau whose
/// probes cross a kink is discarded, and a coordinate is reported as a kink
/// when the `h0` ladder already crosses one.
pub fn ridders_grad<F>(mut f: F, store: &mut ParamStore, ids: &[ParamId], h0: f64) -> Result<Vec<NumericGrad>>
where
    F: for<'a> FnMut(&mut Tape<'a>) -> Result<Var>,
{
    let base = probe(&mut f, store)?;
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.value(id).numel();
        let mut values = Vec::with_capacity(n);
        for k in 0..n {
            // Coordinates within `h0` of a kink are skipped; otherwise the
            // widest kink-free ladder wins.
            let mut best = ridders_at(&mut f, store, id, k, h0, base.kinks)?;
            if best.is_some() {
                for scale in [100.0, 10.0] {
                    if let Some(r) = ridders_at(&mut f, store, id, k, scale * h0, base.kinks)? {
                        best = Some(r);
                        break;
                    }
                }
            }
            let value = best.map(|(v, _)| v);
            values.push(value);
        }
        out.push(NumericGrad { id, values });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FiniteDiffMethod {
    /// One central difference at `step`.
    #[default]
    Central,
    /// Ridders extrapolation starting at `step`.
    Ridders,
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    /// `(coordinate, analytic, numeric)` at the largest relative error.
    pub worst: Option<(usize, f64, f64)>,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockReport> {
        self.blocks.iter().filter(|b| !b.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.blocks {
            writeln!(
                f,
                "{}\t{}\tmax_rel_err={:.3e}\tworst={}\t|analytic|={:.6e}\t|numeric|={:.6e}\tchecked={}\tkinks={}",
                if b.passed { "PASS" } else { "FAIL" },
                b.name,
                b.max_rel_err,
                b.worst.map_or("-".to_string(), |(k, a, n)| format!("[{k}] {a:.6e} vs {n:.6e}")),
                b.analytic_norm,
                b.numeric_norm,
                b.checked,
                b.skipped_kinks
            )?;
        }
        write!(
            f,
            "{} blocks, tolerance {:.1e}: {}",
            self.blocks.len(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub fault: Option<Fault>,
    pub method: FiniteDiffMethod,
}

impl GradCheckOptions {
    /// Ridders extrapolation from [`RIDDERS_START`].
    pub fn ridders() -> Self {
        GradCheckOptions {
            step: RIDDERS_START,
            method: FiniteDiffMethod::Ridders,
            ..Self::default()
        }
    }
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            fault: None,
            method: FiniteDiffMethod::Central,
        }
    }
}

/// Compares tape gradients with central differences for each block in `ids`.
pub fn grad_check<F>(
    mut f: F,
    store: &mut ParamStore,
    ids: &[ParamId],
    opts: GradCheckOptions,
) -> Result<GradReport>
where
    F: for<'a> FnMut(&mut Tape<'a>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store, Precision::F64).with_fault(opts.fault);
        let loss = f(&mut tape)?;
        if !tape.value(loss).item()?.is_finite() {
            return Err(Error::NonFinite("loss at base point".into()));
        }
        tape.backward(loss)?.into_param_grads()
    };
    let numeric = match opts.method {
        FiniteDiffMethod::Central => finite_diff_grad(&mut f, store, ids, opts.step)?,
        FiniteDiffMethod::Ridders => ridders_grad(&mut f, store, ids, opts.step)?,
    };
    let mut blocks = Vec::with_capacity(ids.len());
    for ng in numeric {
        let n = ng.values.len();
        let a = analytic
            .get(ng.id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut max_rel: f64 = 0.0;
        let mut worst = None;
        let (mut an2, mut nn2) = (0.0, 0.0);
        let (mut checked, mut skipped) = (0, 0);
        for (k, (av, nv)) in a.iter().zip(&ng.values).enumerate() {
            match nv {
                Some(nv) => {
                    let e = relative_error(*av, *nv);
                    if worst.is_none() || e > max_rel {
                        max_rel = e;
                        worst = Some((k, *av, *nv));
                    }
                    an2 += av * av;
                    nn2 += nv * nv;
                    checked += 1;
                }
                None => skipped += 1,
            }
        }
        blocks.push(BlockReport {
            name: store.get(ng.id).name.clone(),
            max_rel_err: max_rel,
            worst,
            analytic_norm: an2.sqrt(),
            numeric_norm: nn2.sqrt(),
            checked,
            skipped_kinks: skipped,
            passed: max_rel < opts.tolerance,
        });
    }
    Ok(GradReport {
        tolerance: opts.tolerance,
        blocks,
    })
}
