//! C ABI over `zmoe-core`.
//!
//! Every function returns a [`ZmoeStatus`]. On failure the message is kept in
//! a thread-local slot readable with [`zmoe_last_error`]. Output buffers are
//! caller-allocated; lengths are in elements, not bytes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use zmoe_core::codec::{decompose, measure_entropy, recompose, Bf16Buffer, SmChunk};
use zmoe_core::container::{Container, ExpertKey};
use zmoe_core::planner::{fit_selection_probs, hit_distribution, RankModel};
use zmoe_core::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZmoeStatus {
    Ok = 0,
    InvalidArgument = 1,
    NotFound = 2,
    Corruption = 3,
    Convergence = 4,
    Io = 5,
    BufferTooSmall = 6,
    NullPointer = 7,
    Internal = 8,
}

/// Opaque handle to an open container.
pub struct ZmoeContainer {
    inner: Container,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> ZmoeStatus {
    match err {
        Error::InvalidArgument(_) | Error::TooLarge(_) | Error::Capacity { .. } | Error::DegenerateModel(_) => {
            ZmoeStatus::InvalidArgument
        }
        Error::NotFound(_) => ZmoeStatus::NotFound,
        Error::Corruption(_) | Error::Format(_) | Error::Codec { .. } | Error::UnsupportedCodec(_) | Error::Json(_) => {
            ZmoeStatus::Corruption
        }
        Error::Convergence { .. } => ZmoeStatus::Convergence,
        Error::Io(_) => ZmoeStatus::Io,
        Error::Internal(_) => ZmoeStatus::Internal,
    }
}

fn fail(status: ZmoeStatus, msg: impl Into<String>) -> ZmoeStatus {
    set_error(msg);
    status
}

/// Runs `f`, recording errors and converting panics to `Internal`.
fn guard(f: impl FnOnce() -> Result<(), ZmoeStatus>) -> ZmoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ZmoeStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(ZmoeStatus::Internal, "panic inside zmoe"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, ZmoeStatus>;
}

impl<T> OrStatus<T> for zmoe_core::Result<T> {
    fn or_status(self) -> Result<T, ZmoeStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), ZmoeStatus> {
    if p.is_null() {
        Err(fail(ZmoeStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Slice from a possibly null pointer; null is accepted only when `len == 0`.
unsafe fn input<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], ZmoeStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], ZmoeStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, name)?;
    Ok(slice::from_raw_parts_mut(p, len))
}

fn check_capacity(have: usize, need: usize, name: &str) -> Result<(), ZmoeStatus> {
    if have < need {
        Err(fail(ZmoeStatus::BufferTooSmall, format!("{name} holds {have} elements, {need} needed")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn zmoe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Opens a container file and stores a new handle in `out`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn zmoe_container_open(path: *const c_char, out: *mut *mut ZmoeContainer) -> ZmoeStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path).to_str().map_err(|_| fail(ZmoeStatus::InvalidArgument, "path is not UTF-8"))?;
        let inner = Container::open(path).or_status()?;
        *out = Box::into_raw(Box::new(ZmoeContainer { inner }));
        Ok(())
    })
}

/// Releases a handle from [`zmoe_container_open`]. Null is ignored.
///
/// # Safety
/// `handle` must come from `zmoe_container_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn zmoe_container_close(handle: *mut ZmoeContainer) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Exponent shards per tensor and tensors per expert.
///
/// # Safety
/// `handle` must be a live handle; outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn zmoe_container_shape(
    handle: *const ZmoeContainer,
    k: *mut usize,
    tensors_per_expert: *mut usize,
) -> ZmoeStatus {
    guard(|| {
        non_null(handle, "handle")?;
        non_null(k, "k")?;
        non_null(tensors_per_expert, "tensors_per_expert")?;
        let c = &(*handle).inner;
        *k = c.k();
        *tensors_per_expert = c.tensors_per_expert();
        Ok(())
    })
}

/// Element count of one tensor.
///
/// # Safety
/// `handle` must be a live handle and `len` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn zmoe_container_tensor_len(
    handle: *const ZmoeContainer,
    layer: u32,
    expert_id: u32,
    tensor_index: u16,
    len: *mut usize,
) -> ZmoeStatus {
    guard(|| {
        non_null(handle, "handle")?;
        non_null(len, "len")?;
        let rec = (*handle).inner.record(ExpertKey::new(layer, expert_id, tensor_index)).or_status()?;
        *len = rec.element_count as usize;
        Ok(())
    })
}

/// Reads, verifies and reconstructs one tensor into `out` (BF16 words).
///
/// # Safety
/// `handle` must be a live handle and `out` must hold `capacity` words.
#[no_mangle]
pub unsafe extern "C" fn zmoe_container_reconstruct(
    handle: *const ZmoeContainer,
    layer: u32,
    expert_id: u32,
    tensor_index: u16,
    out: *mut u16,
    capacity: usize,
) -> ZmoeStatus {
    guard(|| {
        non_null(handle, "handle")?;
        let t = (*handle).inner.reconstruct(ExpertKey::new(layer, expert_id, tensor_index)).or_status()?;
        check_capacity(capacity, t.len(), "out")?;
        output(out, t.len(), "out")?.copy_from_slice(t.words());
        Ok(())
    })
}

/// Splits `len` BF16 words into sign+mantissa bytes and exponent bytes, each
/// `len` long. `k` only validates the shard count; the exponent output is the
/// concatenation of the shards.
///
/// # Safety
/// `words`, `sm` and `exponents` must each hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn zmoe_decompose(
    words: *const u16,
    len: usize,
    k: usize,
    sm: *mut u8,
    exponents: *mut u8,
) -> ZmoeStatus {
    guard(|| {
        let tensor = Bf16Buffer::new(input(words, len, "words")?.to_vec());
        let (chunk, shards) = decompose(&tensor, k).or_status()?;
        output(sm, len, "sm")?.copy_from_slice(chunk.bytes());
        let exp = output(exponents, len, "exponents")?;
        let mut at = 0;
        for s in &shards {
            exp[at..at + s.bytes.len()].copy_from_slice(&s.bytes);
            at += s.bytes.len();
        }
        Ok(())
    })
}

/// Inverse of [`zmoe_decompose`].
///
/// # Safety
/// `sm`, `exponents` and `words` must each hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn zmoe_recompose(
    sm: *const u8,
    exponents: *const u8,
    len: usize,
    words: *mut u16,
) -> ZmoeStatus {
    guard(|| {
        let chunk = SmChunk::from_bytes(input(sm, len, "sm")?.to_vec());
        let t = recompose(&chunk, input(exponents, len, "exponents")?).or_status()?;
        output(words, len, "words")?.copy_from_slice(t.words());
        Ok(())
    })
}

/// Order-0 Shannon entropy of a byte string in bits per byte.
///
/// # Safety
/// `bytes` must hold `len` bytes and `bits` must be valid.
#[no_mangle]
pub unsafe extern "C" fn zmoe_entropy(bytes: *const u8, len: usize, bits: *mut f64) -> ZmoeStatus {
    guard(|| {
        non_null(bits, "bits")?;
        *bits = measure_entropy(input(bytes, len, "bytes")?).or_status()?;
        Ok(())
    })
}

/// Distribution of the number of successes among independent events with
/// probabilities `q`; writes `n + 1` entries to `out`.
///
/// # Safety
/// `q` must hold `n` values and `out` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn zmoe_hit_distribution(q: *const f64, n: usize, out: *mut f64, capacity: usize) -> ZmoeStatus {
    guard(|| {
        let q = input(q, n, "q")?;
        if let Some(x) = q.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(fail(ZmoeStatus::InvalidArgument, format!("probability {x} outside [0, 1]")));
        }
        check_capacity(capacity, n + 1, "out")?;
        let phi = hit_distribution(q);
        let out = output(out, n + 1, "out")?;
        for (h, o) in out.iter_mut().enumerate() {
            *o = phi.get(h);
        }
        Ok(())
    })
}

/// Fits per-expert selection probabilities whose conditional-Poisson
/// inclusion probabilities match the rank marginals `f` (summing to `k`).
/// Writes `n` values to `q` and the iteration count to `iterations`.
///
/// # Safety
/// `f` and `q` must hold `n` values; `iterations` may be null.
#[no_mangle]
pub unsafe extern "C" fn zmoe_fit_selection(
    f: *const f64,
    n: usize,
    k: usize,
    tol: f64,
    max_iter: usize,
    q: *mut f64,
    iterations: *mut usize,
) -> ZmoeStatus {
    guard(|| {
        let model = RankModel::from_marginals(input(f, n, "f")?.to_vec(), k).or_status()?;
        let fit = fit_selection_probs(&model, tol, max_iter).or_status()?;
        output(q, n, "q")?.copy_from_slice(&fit.q);
        if !iterations.is_null() {
            *iterations = fit.iterations;
        }
        Ok(())
    })
}
