//! C ABI over `palu-core`.
//!
//! Objects cross the boundary as opaque handles (`PaluMatrix`,
//! `PaluDecomposed`, `PaluQuantized`) created by `palu_*` constructors and
//! released with the matching `*_free`. Every fallible call returns a
//! [`PaluStatus`]; on failure `palu_last_error()` describes the cause for the
//! calling thread. Panics never unwind into the caller.
//!
//! Matrices are row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use palu_core::accounting::{kv_cache_bytes, weight_ratio, ModelPreset};
use palu_core::decomposition::{decompose, frobenius_error, reconstruct, DecomposedLayer, Granularity, HeadShape, Whitening};
use palu_core::quant::{fuse_hadamard, quantize, QuantParams, QuantizedLatent};
use palu_core::rank::{allocate, FisherScore, Rounding};
use palu_core::tensor::{random_matrix, svd};
use palu_core::{Matrix, PaluError};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaluStatus {
    Ok = 0,
    /// Bad argument, shape or configuration.
    Validation = 1,
    /// SVD non-convergence, non-positive-definite Gram matrix, NaN/Inf.
    Numerical = 2,
    /// A required pointer was null.
    Null = 4,
    Io = 5,
    /// A Rust panic was caught; the library state is still usable.
    Panic = 6,
}

/// Decomposition granularity: one factor pair per head, per group of
/// `group_size` heads, or one for all heads.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaluGranularity {
    MultiHead = 0,
    GroupHead = 1,
    JointHead = 2,
}

pub struct PaluMatrix(Matrix);
pub struct PaluDecomposed(DecomposedLayer);
pub struct PaluQuantized(QuantizedLatent);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Core(PaluError),
    Null(&'static str),
}

impl From<PaluError> for Failure {
    fn from(e: PaluError) -> Self {
        Failure::Core(e)
    }
}

type FfiResult<T = ()> = Result<T, Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Core(PaluError::InvalidArgument(msg.into()))
}

fn guard(f: impl FnOnce() -> FfiResult) -> PaluStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PaluStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            PaluStatus::Null
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(&e.to_string());
            match e.root() {
                PaluError::Io(_) => PaluStatus::Io,
                _ if e.exit_code() == 2 => PaluStatus::Numerical,
                _ => PaluStatus::Validation,
            }
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            PaluStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn emit<T>(out: *mut *mut T, value: T, what: &'static str) -> FfiResult {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies `src` into a caller buffer of `cap` elements; `*len` receives the
/// full length even when the buffer is too small (a Validation error).
unsafe fn copy_out<T: Copy>(src: &[T], buf: *mut T, cap: usize, len: *mut usize) -> FfiResult {
    if len.is_null() {
        return Err(Failure::Null("len"));
    }
    *len = src.len();
    if src.is_empty() {
        return Ok(());
    }
    if cap < src.len() {
        return Err(invalid(format!("buffer holds {cap} elements, need {}", src.len())));
    }
    if buf.is_null() {
        return Err(Failure::Null("buf"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next `palu_*` call on the same thread.
#[no_mangle]
pub extern "C" fn palu_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn palu_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- matrices ---------------------------------------------------------------

/// Copies `rows * cols` row-major values into a new matrix.
///
/// # Safety
/// `data` must point to `rows * cols` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn palu_matrix_new(rows: usize, cols: usize, data: *const f64, out: *mut *mut PaluMatrix) -> PaluStatus {
    guard(|| {
        let n = rows.checked_mul(cols).ok_or_else(|| invalid("rows * cols overflows"))?;
        let values = slice(data, n, "data")?.to_vec();
        emit(out, PaluMatrix(Matrix::new(rows, cols, values)?), "out")
    })
}

/// Seeded random matrix. With `spectrum` in (0, 1] its singular values are
/// `1, γ, γ², …`; with `spectrum <= 0` entries are standard normal.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn palu_matrix_random(rows: usize, cols: usize, seed: u64, spectrum: f64, out: *mut *mut PaluMatrix) -> PaluStatus {
    guard(|| {
        let spectrum = (spectrum > 0.0 || spectrum.is_nan()).then_some(spectrum);
        emit(out, PaluMatrix(random_matrix(rows, cols, seed, spectrum)?), "out")
    })
}

/// # Safety
/// `m` must come from a `palu_*` constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn palu_matrix_free(m: *mut PaluMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Row count; 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn palu_matrix_rows(m: *const PaluMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.rows())
}

/// Column count; 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn palu_matrix_cols(m: *const PaluMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.cols())
}

/// Row-major copy of the entries.
///
/// # Safety
/// `buf` must hold `cap` doubles; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn palu_matrix_copy(m: *const PaluMatrix, buf: *mut f64, cap: usize, len: *mut usize) -> PaluStatus {
    guard(|| copy_out(deref(m, "m")?.0.as_slice(), buf, cap, len))
}

/// Singular values in non-increasing order (`min(rows, cols)` of them).
///
/// # Safety
/// `buf` must hold `cap` doubles; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn palu_svd_singular_values(m: *const PaluMatrix, buf: *mut f64, cap: usize, len: *mut usize) -> PaluStatus {
    guard(|| copy_out(&svd(&deref(m, "m")?.0)?.singular_values, buf, cap, len))
}

// ---- decomposition ----------------------------------------------------------

/// Truncated-SVD factorization of a `d_model × (n_heads·head_dim)`
/// projection, one rank per group (`n_heads / group_size` of them; 1 for
/// joint, `n_heads` for multi-head). `group_size` is read only for
/// `GroupHead`.
///
/// # Safety
/// `ranks` must point to `n_ranks` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn palu_decompose(
    w: *const PaluMatrix,
    n_heads: usize,
    head_dim: usize,
    granularity: PaluGranularity,
    group_size: usize,
    ranks: *const usize,
    n_ranks: usize,
    out: *mut *mut PaluDecomposed,
) -> PaluStatus {
    guard(|| {
        let w = &deref(w, "w")?.0;
        let g = match granularity {
            PaluGranularity::MultiHead => Granularity::multi_head(),
            PaluGranularity::GroupHead => Granularity::group_head(group_size),
            PaluGranularity::JointHead => Granularity::joint_head(n_heads),
        };
        let shape = HeadShape {
            d_model: w.rows(),
            n_heads,
            head_dim,
        };
        let ranks = slice(ranks, n_ranks, "ranks")?;
        emit(out, PaluDecomposed(decompose(w, shape, g, ranks, Whitening::Plain)?), "out")
    })
}

/// # Safety
/// `d` must come from a `palu_*` constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn palu_decomposed_free(d: *mut PaluDecomposed) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Per-group ranks.
///
/// # Safety
/// `buf` must hold `cap` values; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn palu_decomposed_ranks(d: *const PaluDecomposed, buf: *mut usize, cap: usize, len: *mut usize) -> PaluStatus {
    guard(|| copy_out(&deref(d, "d")?.0.ranks(), buf, cap, len))
}

/// Dense `A·B` of every group, concatenated into the full projection.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn palu_reconstruct(d: *const PaluDecomposed, out: *mut *mut PaluMatrix) -> PaluStatus {
    guard(|| emit(out, PaluMatrix(reconstruct(&deref(d, "d")?.0)?), "out"))
}

/// `‖W − reconstruct(d)‖_F`.
///
/// # Safety
/// `error` must be writable.
#[no_mangle]
pub unsafe extern "C" fn palu_frobenius_error(d: *const PaluDecomposed, w: *const PaluMatrix, error: *mut f64) -> PaluStatus {
    guard(|| {
        let e = frobenius_error(&deref(d, "d")?.0, &deref(w, "w")?.0)?;
        *error.as_mut().ok_or(Failure::Null("error"))? = e;
        Ok(())
    })
}

/// Folds a Hadamard rotation into every factor pair; the product `A·B` is
/// unchanged.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn palu_fuse_hadamard(d: *const PaluDecomposed, out: *mut *mut PaluDecomposed) -> PaluStatus {
    guard(|| emit(out, PaluDecomposed(fuse_hadamard(&deref(d, "d")?.0)?.layer), "out"))
}

// ---- quantization -----------------------------------------------------------

/// Per-row asymmetric quantization at 2, 3, 4 or 8 bits.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn palu_quantize(m: *const PaluMatrix, bits: u8, out: *mut *mut PaluQuantized) -> PaluStatus {
    guard(|| {
        let params = QuantParams::new(bits)?;
        emit(out, PaluQuantized(quantize(&deref(m, "m")?.0, params)?), "out")
    })
}

/// # Safety
/// `q` must come from `palu_quantize` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn palu_quantized_free(q: *mut PaluQuantized) {
    if !q.is_null() {
        drop(Box::from_raw(q));
    }
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn palu_dequantize(q: *const PaluQuantized, out: *mut *mut PaluMatrix) -> PaluStatus {
    guard(|| emit(out, PaluMatrix(deref(q, "q")?.0.dequantize()?), "out"))
}

/// Unpacked codes, one byte each, row-major.
///
/// # Safety
/// `buf` must hold `cap` bytes; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn palu_quantized_codes(q: *const PaluQuantized, buf: *mut u8, cap: usize, len: *mut usize) -> PaluStatus {
    guard(|| copy_out(deref(q, "q")?.0.codes(), buf, cap, len))
}

/// Per-row scales.
///
/// # Safety
/// `buf` must hold `cap` doubles; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn palu_quantized_scales(q: *const PaluQuantized, buf: *mut f64, cap: usize, len: *mut usize) -> PaluStatus {
    guard(|| copy_out(deref(q, "q")?.0.scales(), buf, cap, len))
}

// ---- accounting and allocation ------------------------------------------------

/// `(m·r + r·n) / (m·n)`: factor storage relative to the dense matrix.
#[no_mangle]
pub extern "C" fn palu_weight_ratio(m: f64, n: f64, r: f64) -> f64 {
    weight_ratio(m, n, r)
}

/// KV-cache bytes for a named preset (e.g. "llama2-7b") at `tokens` tokens,
/// under a uniform group-head plan keeping `budget_rate` of the width and
/// caching latents at `bits` bits. `compressed` excludes metadata.
///
/// # Safety
/// `preset` must be a NUL-terminated string; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn palu_kv_cache_bytes(
    preset: *const c_char,
    tokens: u64,
    group_size: usize,
    budget_rate: f64,
    bits: u32,
    baseline: *mut u64,
    compressed: *mut u64,
) -> PaluStatus {
    guard(|| {
        if preset.is_null() {
            return Err(Failure::Null("preset"));
        }
        let name = CStr::from_ptr(preset).to_str().map_err(|_| invalid("preset name is not UTF-8"))?;
        let p = ModelPreset::by_name(name)?;
        let plan = p.uniform_plan(Granularity::group_head(group_size), budget_rate)?;
        let bytes = kv_cache_bytes(&p, tokens, Some(&plan), bits, false)?;
        *baseline.as_mut().ok_or(Failure::Null("baseline"))? = bytes.baseline;
        *compressed.as_mut().ok_or(Failure::Null("compressed"))? = bytes.compressed;
        Ok(())
    })
}

/// Splits `round(budget_rate · Σ widths)` ranks across `n` targets in
/// proportion to `scores`. Targets are identified by index; ties go to the
/// lower index. `block` > 0 rounds each rank down to a multiple of it.
///
/// # Safety
/// `scores`, `widths` and `ranks_out` must each hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn palu_allocate(
    scores: *const f64,
    widths: *const usize,
    n: usize,
    d_model: usize,
    budget_rate: f64,
    min_rank: usize,
    block: usize,
    ranks_out: *mut usize,
) -> PaluStatus {
    guard(|| {
        let scores = slice(scores, n, "scores")?;
        let widths = slice(widths, n, "widths")?;
        let targets: Vec<FisherScore> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| FisherScore {
                target_id: format!("{i:020}"),
                score: *s,
            })
            .collect();
        let rounding = if block > 0 { Rounding::Block(block) } else { Rounding::None };
        let plan = allocate(&targets, widths, d_model, budget_rate, min_rank, rounding)?;
        let ranks: Vec<usize> = plan.entries.iter().map(|e| e.allocated_rank).collect();
        let mut len = 0;
        copy_out(&ranks, ranks_out, n, &mut len)
    })
}
