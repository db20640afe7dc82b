//! C interface: transport solvers, report metrics and checkpoint-backed
//! report generation behind opaque handles.
//!
//! Every fallible call returns a `HialignStatus`; the message of the last
//! failure on the calling thread is available from
//! `hialign_last_error_message`. Strings handed out by this library are
//! released with `hialign_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hialign::eval::{evaluate, MetricReport};
use hialign::model::{Decoding, Model};
use hialign::numerics::Tensor;
use hialign::ot::{cost_matrix, exact_ot, sinkhorn, Histogram, Metric, OtMode, SinkhornConfig};
use hialign::text::{detokenize, TextRules, Vocabulary};
use hialign::training::load_checkpoint;
use hialign::visual::{extract_patches, Image};
use hialign::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HialignStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Numerical = 4,
    Io = 5,
    Format = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HialignStatus {
    match e {
        Error::Dimension(_) | Error::Length { .. } => HialignStatus::Dimension,
        Error::Numerical(_) => HialignStatus::Numerical,
        Error::Io { .. } => HialignStatus::Io,
        Error::Format(_) | Error::Json(_) => HialignStatus::Format,
        _ => HialignStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic for `hialign_last_error_message`.
fn guard(f: impl FnOnce() -> Result<(), (HialignStatus, String)>) -> HialignStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HialignStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            HialignStatus::Panic
        }
    }
}

fn lib(e: Error) -> (HialignStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (HialignStatus, String) {
    (HialignStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (HialignStatus, String) {
    (HialignStatus::InvalidArgument, msg.into())
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (HialignStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (HialignStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("interior nul removed").into_raw()
}

/// Message of the last failed call on this thread, or null when none.
/// Release with `hialign_string_free`.
#[no_mangle]
pub extern "C" fn hialign_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

/// Caller contract: `s` must come from this library and not have been freed; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hialign_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn hialign_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Ground costs between point sets.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HialignMetric {
    L2 = 0,
    L1 = 1,
    Cosine = 2,
    Kl = 3,
}

impl From<HialignMetric> for Metric {
    fn from(m: HialignMetric) -> Metric {
        match m {
            HialignMetric::L2 => Metric::L2,
            HialignMetric::L1 => Metric::L1,
            HialignMetric::Cosine => Metric::Cosine,
            HialignMetric::Kl => Metric::Kl,
        }
    }
}

/// Solver settings. `exact` ignores the Sinkhorn fields and needs balanced masses.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct HialignOtOptions {
    pub sigma: f64,
    pub tau: f64,
    pub max_iter: u32,
    pub tol: f64,
    pub unbalanced: bool,
    pub exact: bool,
    pub metric: HialignMetric,
}

/// Defaults of the Sinkhorn solver under an L2 ground cost.
#[no_mangle]
pub extern "C" fn hialign_ot_options_default() -> HialignOtOptions {
    let d = SinkhornConfig::default();
    HialignOtOptions {
        sigma: d.sigma,
        tau: d.tau,
        max_iter: d.max_iter as u32,
        tol: d.tol,
        unbalanced: false,
        exact: false,
        metric: HialignMetric::L2,
    }
}

/// Transport between `n` points `x` and `m` points `y` (row-major, width `d`)
/// under uniform weights. Writes the cost to `out_cost` and, when `out_plan`
/// is not null, the `n×m` plan row-major.
/// Caller contract: `x` holds `n*d` values, `y` holds `m*d`, `out_plan` has room for `n*m`.
#[no_mangle]
pub unsafe extern "C" fn hialign_transport(
    x: *const f64,
    n: usize,
    y: *const f64,
    m: usize,
    d: usize,
    options: *const HialignOtOptions,
    out_cost: *mut f64,
    out_plan: *mut f64,
) -> HialignStatus {
    guard(|| {
        if options.is_null() {
            return Err(null("options"));
        }
        if out_cost.is_null() {
            return Err(null("out_cost"));
        }
        if n == 0 || m == 0 || d == 0 {
            return Err(invalid("point sets must be non-empty with d >= 1"));
        }
        let o = *options;
        let xs = Tensor::matrix(n, d, slice(x, n * d, "x")?.to_vec()).map_err(lib)?;
        let ys = Tensor::matrix(m, d, slice(y, m * d, "y")?.to_vec()).map_err(lib)?;
        let c = cost_matrix(&xs, &ys, o.metric.into()).map_err(lib)?;
        let (a, b) = (Histogram::uniform(n), Histogram::uniform(m));
        let plan = if o.exact {
            exact_ot(&a, &b, &c).map_err(lib)?
        } else {
            let cfg = SinkhornConfig {
                sigma: o.sigma,
                tau: o.tau,
                max_iter: o.max_iter as usize,
                tol: o.tol,
                mode: if o.unbalanced { OtMode::Unbalanced } else { OtMode::Balanced },
            };
            sinkhorn(&a, &b, &c, &cfg).map_err(lib)?
        };
        *out_cost = plan.cost;
        if !out_plan.is_null() {
            std::slice::from_raw_parts_mut(out_plan, n * m).copy_from_slice(plan.plan.data());
        }
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HialignMetrics {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub meteor_lite: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
}

impl From<MetricReport> for HialignMetrics {
    fn from(r: MetricReport) -> Self {
        HialignMetrics {
            bleu1: r.bleu1,
            bleu2: r.bleu2,
            bleu3: r.bleu3,
            bleu4: r.bleu4,
            rouge_l: r.rouge_l,
            cider_d: r.cider_d,
            meteor_lite: r.meteor_lite,
            ce_precision: r.ce_precision,
            ce_recall: r.ce_recall,
            ce_f1: r.ce_f1,
        }
    }
}

unsafe fn strings<'a>(p: *const *const c_char, n: usize, what: &str) -> Result<Vec<&'a str>, (HialignStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    std::slice::from_raw_parts(p, n).iter().map(|&s| c_str(s, what)).collect()
}

/// Corpus metrics of `n` candidate reports against `n` references, with the
/// bundled finding lexicon for the clinical-efficacy proxy.
/// Caller contract: `candidates` and `references` each point to `n` nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn hialign_evaluate(
    candidates: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    out: *mut HialignMetrics,
) -> HialignStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let c = strings(candidates, n, "candidates")?;
        let r = strings(references, n, "references")?;
        let rules = TextRules::default();
        *out = evaluate(&c, &r, &rules.lexicon).map_err(lib)?.into();
        Ok(())
    })
}

/// A trained model with its vocabulary.
pub struct HialignModel {
    model: Model,
    vocab: Vocabulary,
}

/// Load a checkpoint directory written by `hialign train`.
/// Caller contract: `dir` is a nul-terminated path; `out` receives the handle.
#[no_mangle]
pub unsafe extern "C" fn hialign_model_load(dir: *const c_char, out: *mut *mut HialignModel) -> HialignStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ck = load_checkpoint(c_str(dir, "dir")?).map_err(lib)?;
        *out = Box::into_raw(Box::new(HialignModel { model: ck.model, vocab: ck.vocab }));
        Ok(())
    })
}

/// Caller contract: `model` comes from `hialign_model_load` and is not used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hialign_model_free(model: *mut HialignModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of a loaded model, 0 for null.
/// Caller contract: `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hialign_model_vocab_size(model: *const HialignModel) -> usize {
    model.as_ref().map_or(0, |m| m.vocab.len())
}

/// Generate a report for a grayscale image of `height×width` pixels in
/// [0, 1], row-major. `beam_width` 0 decodes greedily. The report is
/// written to `out` and released with `hialign_string_free`.
/// Caller contract: `model` is a live handle and `pixels` holds `height*width` values.
#[no_mangle]
pub unsafe extern "C" fn hialign_model_generate(
    model: *const HialignModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    beam_width: usize,
    out: *mut *mut c_char,
) -> HialignStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let h = model.as_ref().ok_or_else(|| null("model"))?;
        let image = Image::new(height, width, slice(pixels, height * width, "pixels")?.to_vec()).map_err(lib)?;
        let patches = extract_patches(&image, &h.model.cfg.grid).map_err(lib)?;
        let memory = h.model.memory(&patches).map_err(lib)?;
        let decoding = if beam_width == 0 { Decoding::Greedy } else { Decoding::Beam(beam_width) };
        let ids = h.model.generate(&memory, decoding, h.model.cfg.max_len).map_err(lib)?;
        *out = into_c_string(detokenize(&h.vocab.decode(&ids)));
        Ok(())
    })
}
