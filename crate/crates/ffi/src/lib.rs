//! C interface to the kriss linker.
//!
//! Every fallible function returns a [`KrissStatus`]; on failure the message
//! is available from [`kriss_last_error`] on the same thread. Handles are
//! opaque and must be released with their matching `_free` function. Strings
//! returned through out-parameters are owned by the caller and released with
//! [`kriss_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use kriss::mention_gen::MentionExample;
use kriss::ontology::{entity_reference_text, EntityCatalog};
use kriss::prototype_index::Linker;
use kriss::trainer::loss::info_nce_pair_loss;
use kriss::{Error, ErrorClass};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KrissStatus {
    Ok = 0,
    /// Null pointer, invalid UTF-8 or an out-of-range argument.
    InvalidArgument = 1,
    /// Bad configuration or usage.
    Usage = 2,
    /// Missing, malformed or inconsistent data.
    Data = 3,
    /// A non-finite value was produced.
    Numeric = 4,
    /// Internal panic caught at the boundary.
    Panic = 5,
}

/// Entity catalog handle.
pub struct KrissCatalog(EntityCatalog);

/// Linker handle: encoder plus prototype index.
pub struct KrissLinker(Linker);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

enum Failure {
    Arg(String),
    Kriss(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Kriss(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KrissStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KrissStatus::Ok,
        Ok(Err(Failure::Arg(m))) => {
            set_error(m);
            KrissStatus::InvalidArgument
        }
        Ok(Err(Failure::Kriss(e))) => {
            set_error(e.to_string());
            match e.class() {
                ErrorClass::Usage => KrissStatus::Usage,
                ErrorClass::Data => KrissStatus::Data,
                ErrorClass::Numeric => KrissStatus::Numeric,
            }
        }
        Err(_) => {
            set_error("internal panic");
            KrissStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Arg(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("{what} is not valid UTF-8")))
}

fn check_out<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::Arg(format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn to_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::Arg("result contains a NUL byte".into()))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next kriss call on the same thread.
#[no_mangle]
pub extern "C" fn kriss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn kriss_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads an entities JSONL file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kriss_catalog_open(path: *const c_char, out: *mut *mut KrissCatalog) -> KrissStatus {
    guard(|| {
        check_out(out, "out")?;
        let path = read_str(path, "path")?;
        let catalog = EntityCatalog::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(KrissCatalog(catalog)));
        Ok(())
    })
}

/// Number of entities, or 0 for a null handle.
///
/// # Safety
/// `catalog` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kriss_catalog_len(catalog: *const KrissCatalog) -> usize {
    catalog.as_ref().map_or(0, |c| c.0.len())
}

/// Renders the reference text of entity `id`.
///
/// # Safety
/// `catalog` must be a live handle, `id` a NUL-terminated string and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn kriss_catalog_reference_text(
    catalog: *const KrissCatalog,
    id: *const c_char,
    include_description: bool,
    out: *mut *mut c_char,
) -> KrissStatus {
    guard(|| {
        check_out(out, "out")?;
        let catalog = catalog
            .as_ref()
            .ok_or_else(|| Failure::Arg("catalog is null".into()))?;
        let id = read_str(id, "id")?;
        let entity = catalog.0.get(id)?;
        *out = to_c_string(entity_reference_text(entity, include_description))?;
        Ok(())
    })
}

/// # Safety
/// `catalog` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kriss_catalog_free(catalog: *mut KrissCatalog) {
    if !catalog.is_null() {
        drop(Box::from_raw(catalog));
    }
}

/// Opens an index directory written by `kriss index build`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kriss_linker_open(dir: *const c_char, out: *mut *mut KrissLinker) -> KrissStatus {
    guard(|| {
        check_out(out, "out")?;
        let dir = read_str(dir, "dir")?;
        let linker = Linker::load(Path::new(dir))?;
        *out = Box::into_raw(Box::new(KrissLinker(linker)));
        Ok(())
    })
}

/// Links one mention given as a JSON object with the fields of a
/// `mentions.jsonl` line and writes the result as JSON.
///
/// # Safety
/// `linker` must be a live handle, `query_json` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kriss_linker_link_json(
    linker: *const KrissLinker,
    query_json: *const c_char,
    top_k: usize,
    out: *mut *mut c_char,
) -> KrissStatus {
    guard(|| {
        check_out(out, "out")?;
        let linker = linker
            .as_ref()
            .ok_or_else(|| Failure::Arg("linker is null".into()))?;
        let text = read_str(query_json, "query_json")?;
        let query: MentionExample =
            serde_json::from_str(text).map_err(|e| Failure::Arg(format!("query_json: {e}")))?;
        let result = linker.0.link(&query, top_k)?;
        let json = serde_json::to_string(&result).map_err(|e| Failure::Arg(e.to_string()))?;
        *out = to_c_string(json)?;
        Ok(())
    })
}

/// # Safety
/// `linker` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kriss_linker_free(linker: *mut KrissLinker) {
    if !linker.is_null() {
        drop(Box::from_raw(linker));
    }
}

/// Pair InfoNCE loss of anchor `i` and positive `j` over `count` row-major
/// vectors of width `dim`.
///
/// # Safety
/// `vectors` must point to `count * dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kriss_info_nce_pair_loss(
    vectors: *const f64,
    count: usize,
    dim: usize,
    i: usize,
    j: usize,
    tau: f64,
    out: *mut f64,
) -> KrissStatus {
    guard(|| {
        check_out(out, "out")?;
        if vectors.is_null() {
            return Err(Failure::Arg("vectors is null".into()));
        }
        if dim == 0 {
            return Err(Failure::Arg("dim must be positive".into()));
        }
        if i >= count || j >= count || i == j {
            return Err(Failure::Arg(format!("need distinct i, j < {count}")));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Failure::Arg("tau must be positive and finite".into()));
        }
        let flat = std::slice::from_raw_parts(vectors, count * dim);
        let rows: Vec<Vec<f64>> = flat.chunks(dim).map(<[f64]>::to_vec).collect();
        let loss = info_nce_pair_loss(i, j, &rows, tau);
        if !loss.is_finite() {
            return Err(Error::NonFinite("info_nce_pair_loss".into()).into());
        }
        *out = loss;
        Ok(())
    })
}
