//! C interface to segmentation, counterfactual generation and KernelSHAP.
//!
//! Handles are opaque and owned by the caller until passed to the matching
//! `*_free`. Every fallible call returns a [`ClStatus`]; on failure the
//! message is available from [`cl_last_error_message`] on the same thread.
//! Forest operations never mutate their input and return a new handle.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use counterlens::attribution::{kernel_shap, kernel_weight};
use counterlens::conllu::{parse_conllu_strict, validate_tree};
use counterlens::document::Document;
use counterlens::engine::{
    count_valid, enumerate_valid, realize_batch, sample_valid, Counterfactual, ValidCount,
};
use counterlens::rules::RemovabilityRuleTable;
use counterlens::segment::SegmentForest;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    SegmentError = 4,
    EngineError = 5,
    ShapError = 6,
    OutOfRange = 7,
    /// The valid count does not fit the output type.
    Overflow = 8,
    Panic = 9,
}

/// Segment forest over one CoNLL-U document.
pub struct ClForest {
    inner: SegmentForest,
}

/// Realized counterfactuals with their inclusion vectors.
pub struct ClCounterfactuals {
    items: Vec<Counterfactual>,
    texts: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: ClStatus, msg: impl Into<String>) -> ClStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> ClStatus) -> ClStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == ClStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(ClStatus::Panic, "internal panic"),
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, ClStatus> {
    if p.is_null() {
        return Err(fail(ClStatus::NullArgument, "string argument is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| fail(ClStatus::InvalidUtf8, e.to_string()))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

fn wrap_forest(
    r: Result<SegmentForest, counterlens::segment::SegmentError>,
    out: *mut *mut ClForest,
) -> ClStatus {
    match r {
        Ok(inner) => {
            unsafe { *out = boxed(ClForest { inner }) };
            ClStatus::Ok
        }
        Err(e) => fail(ClStatus::SegmentError, e.to_string()),
    }
}

fn wrap_counterfactuals(
    forest: &SegmentForest,
    vectors: Vec<counterlens::engine::CounterfactualVector>,
    out: *mut *mut ClCounterfactuals,
) -> ClStatus {
    let items = match realize_batch(forest, &vectors) {
        Ok(c) => c,
        Err(e) => return fail(ClStatus::EngineError, e.to_string()),
    };
    let texts = items
        .iter()
        .map(|c| CString::new(c.text.replace('\0', " ")).unwrap_or_default())
        .collect();
    unsafe { *out = boxed(ClCounterfactuals { items, texts }) };
    ClStatus::Ok
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a forest from CoNLL-U text with the default removability rules.
/// Several sentences share one document root.
///
/// # Safety
/// `conllu` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cl_forest_from_conllu(
    conllu: *const c_char,
    out: *mut *mut ClForest,
) -> ClStatus {
    guard(|| {
        if out.is_null() {
            return fail(ClStatus::NullArgument, "out is null");
        }
        let src = match read_str(conllu) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let parses = match parse_conllu_strict(src) {
            Ok(p) => p,
            Err(e) => return fail(ClStatus::ParseError, e.to_string()),
        };
        for p in &parses {
            if let Some(d) = validate_tree(p).first() {
                return fail(ClStatus::ParseError, d.to_string());
            }
        }
        let doc = Document::from_sentences(&parses);
        wrap_forest(
            SegmentForest::from_document(&doc, &RemovabilityRuleTable::default()),
            out,
        )
    })
}

/// # Safety
/// `forest` must come from this library and not be freed twice. Null is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn cl_forest_free(forest: *mut ClForest) {
    if !forest.is_null() {
        drop(Box::from_raw(forest));
    }
}

/// Number of variable segments `M` (every segment except the root).
///
/// # Safety
/// `forest` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cl_forest_dimension(forest: *const ClForest, out: *mut usize) -> ClStatus {
    guard(|| {
        if forest.is_null() || out.is_null() {
            return fail(ClStatus::NullArgument, "forest or out is null");
        }
        *out = (*forest).inner.dimension();
        ClStatus::Ok
    })
}

/// Number of valid counterfactual vectors, including alternative choices.
///
/// # Safety
/// `forest` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cl_forest_count(forest: *const ClForest, out: *mut u64) -> ClStatus {
    guard(|| {
        if forest.is_null() || out.is_null() {
            return fail(ClStatus::NullArgument, "forest or out is null");
        }
        match count_valid(&(*forest).inner) {
            ValidCount::Exact(n) => match u64::try_from(n) {
                Ok(n) => {
                    *out = n;
                    ClStatus::Ok
                }
                Err(_) => fail(ClStatus::Overflow, format!("{n} does not fit in 64 bits")),
            },
            ValidCount::Saturated => fail(ClStatus::Overflow, "count exceeds 128 bits"),
        }
    })
}

/// Indented outline of the segments, one per line. Free with
/// [`cl_string_free`].
///
/// # Safety
/// `forest` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cl_forest_outline(
    forest: *const ClForest,
    out: *mut *mut c_char,
) -> ClStatus {
    guard(|| {
        if forest.is_null() || out.is_null() {
            return fail(ClStatus::NullArgument, "forest or out is null");
        }
        *out = CString::new((*forest).inner.outline().replace('\0', " "))
            .unwrap_or_default()
            .into_raw();
        ClStatus::Ok
    })
}

/// # Safety
/// `s` must come from this library. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn cl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Collapses the branch under `segment` into it. Merging a leaf returns an
/// unchanged copy.
///
/// # Safety
/// `forest` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cl_forest_merge(
    forest: *const ClForest,
    segment: u32,
    out: *mut *mut ClForest,
) -> ClStatus {
    guard(|| {
        if forest.is_null() || out.is_null() {
            return fail(ClStatus::NullArgument, "forest or out is null");
        }
        wrap_forest((*forest).inner.merge_branch(segment).map(|m| m.forest), out)
    })
}

/// Undoes the most recent merge of `segment`.
///
/// # Safety
/// `forest` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cl_forest_expand(
    forest: *const ClForest,
    segment: u32,
    out: *mut *mut ClForest,
) -> ClStatus {
    guard(|| {
        if forest.is_null() || out.is_null() {
            return fail(ClStatus::NullArgument, "forest or out is null");
        }
        wrap_forest((*forest).inner.expand(segment), out)
    })
}

/// Replaces the alternatives of leaf `segment` with `options[0..count]`.
/// `count == 0` clears them.
///
/// # Safety
/// `forest` must be a live handle, `options` must point at `count`
/// NUL-terminated strings (or be null when `count` is 0) and `out` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn cl_forest_set_alternatives(
    forest: *const ClForest,
    segment: u32,
    options: *const *const c_char,
    count: usize,
    out: *mut *mut ClForest,
) -> ClStatus {
    guard(|| {
        if forest.is_null() || out.is_null() || (options.is_null() && count > 0) {
            return fail(ClStatus::NullArgument, "forest, options or out is null");
        }
        let mut opts = Vec::with_capacity(count);
        for i in 0..count {
            match read_str(*options.add(i)) {
                Ok(s) => opts.push(s.to_string()),
                Err(s) => return s,
            }
        }
        wrap_forest((*forest).inner.configure_alternatives(segment, &opts), out)
    })
}

/// Every valid counterfactual, in lexicographic vector order. Fails with
/// `ENGINE_ERROR` when the count exceeds `cap`.
///
/// # Safety
/// `forest` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cl_counterfactuals_enumerate(
    forest: *const ClForest,
    cap: usize,
    out: *mut *mut ClCounterfactuals,
) -> ClStatus {
    guard(|| {
        if forest.is_null() || out.is_null() {
            return fail(ClStatus::NullArgument, "forest or out is null");
        }
        let f = &(*forest).inner;
        match enumerate_valid(f, cap) {
            Ok(vs) => wrap_counterfactuals(f, vs, out),
            Err(e) => fail(ClStatus::EngineError, e.to_string()),
        }
    })
}

/// `k` distinct counterfactuals drawn uniformly, deterministic in `seed`.
///
/// # Safety
/// `forest` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cl_counterfactuals_sample(
    forest: *const ClForest,
    k: usize,
    seed: u64,
    out: *mut *mut ClCounterfactuals,
) -> ClStatus {
    guard(|| {
        if forest.is_null() || out.is_null() {
            return fail(ClStatus::NullArgument, "forest or out is null");
        }
        let f = &(*forest).inner;
        match sample_valid(f, k, seed) {
            Ok(vs) => wrap_counterfactuals(f, vs, out),
            Err(e) => fail(ClStatus::EngineError, e.to_string()),
        }
    })
}

/// # Safety
/// `list` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn cl_counterfactuals_len(list: *const ClCounterfactuals) -> usize {
    if list.is_null() {
        0
    } else {
        let list = &*list;
        list.items.len()
    }
}

/// Text of item `index`, or null when out of range. Owned by the list.
///
/// # Safety
/// `list` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn cl_counterfactuals_text(
    list: *const ClCounterfactuals,
    index: usize,
) -> *const c_char {
    if list.is_null() {
        return ptr::null();
    }
    let list = &*list;
    list.texts.get(index).map_or(ptr::null(), |s| s.as_ptr())
}

/// Writes the `M` inclusion bits of item `index` as 0/1 bytes.
///
/// # Safety
/// `list` must be a live handle and `bits` must have room for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cl_counterfactuals_bits(
    list: *const ClCounterfactuals,
    index: usize,
    bits: *mut u8,
    len: usize,
) -> ClStatus {
    guard(|| {
        if list.is_null() || bits.is_null() {
            return fail(ClStatus::NullArgument, "list or bits is null");
        }
        let list = &*list;
        let Some(cf) = list.items.get(index) else {
            return fail(ClStatus::OutOfRange, format!("index {index} out of range"));
        };
        let v = &cf.vector.bits;
        if len != v.len() {
            return fail(
                ClStatus::OutOfRange,
                format!("buffer holds {len} bits, vector has {}", v.len()),
            );
        }
        for (i, &b) in v.iter().enumerate() {
            *bits.add(i) = b as u8;
        }
        ClStatus::Ok
    })
}

/// # Safety
/// `list` must come from this library and not be freed twice. Null is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn cl_counterfactuals_free(list: *mut ClCounterfactuals) {
    if !list.is_null() {
        drop(Box::from_raw(list));
    }
}

/// Kernel weight of a coalition of size `s` among `m` players.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cl_kernel_weight(m: usize, s: usize, out: *mut f64) -> ClStatus {
    guard(|| {
        if out.is_null() {
            return fail(ClStatus::NullArgument, "out is null");
        }
        match kernel_weight(m, s) {
            Ok(w) => {
                *out = w;
                ClStatus::Ok
            }
            Err(e) => fail(ClStatus::ShapError, e.to_string()),
        }
    })
}

/// Attributions from `rows` observations. `bits` is row-major `rows * m`
/// bytes (non-zero means included) and `outcomes` holds one probability per
/// row. Writes `phi0` and `m` values to `phi`.
///
/// # Safety
/// The buffers must hold the sizes stated above.
#[no_mangle]
pub unsafe extern "C" fn cl_kernel_shap(
    bits: *const u8,
    outcomes: *const f64,
    rows: usize,
    m: usize,
    phi0: *mut f64,
    phi: *mut f64,
) -> ClStatus {
    guard(|| {
        if bits.is_null() || outcomes.is_null() || phi0.is_null() || (phi.is_null() && m > 0) {
            return fail(ClStatus::NullArgument, "buffer argument is null");
        }
        let records: Vec<(Vec<bool>, f64)> = (0..rows)
            .map(|r| {
                (
                    (0..m).map(|j| *bits.add(r * m + j) != 0).collect(),
                    *outcomes.add(r),
                )
            })
            .collect();
        let ids: Vec<u32> = (1..=m as u32).collect();
        match kernel_shap(&records, &ids) {
            Ok(res) => {
                *phi0 = res.phi0;
                for (j, v) in res.phi.iter().enumerate() {
                    *phi.add(j) = *v;
                }
                ClStatus::Ok
            }
            Err(e) => fail(ClStatus::ShapError, e.to_string()),
        }
    })
}
