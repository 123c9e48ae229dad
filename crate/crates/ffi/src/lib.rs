//! C interface: opaque model handles, planar float buffers and integer
//! status codes. The message of the last failure on the calling thread is
//! available from [`htd_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use htdemucs::dsp::AudioClip;
use htdemucs::evalr::{sdr_chunks, SdrOptions};
use htdemucs::separator::{aligned_chunk_frames, load_weights, plan_chunks, separate, SourceModel};
use htdemucs::unet::Model;
use htdemucs::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HtdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    DegenerateRow = 4,
    Contract = 5,
    Length = 6,
    Format = 7,
    Corruption = 8,
    Config = 9,
    NonFinite = 10,
    Data = 11,
    Io = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

impl From<&Error> for HtdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => Self::Dimension,
            Error::DegenerateRow { .. } => Self::DegenerateRow,
            Error::Contract(_) => Self::Contract,
            Error::Length(_) => Self::Length,
            Error::Format(_) => Self::Format,
            Error::Corruption(_) => Self::Corruption,
            Error::Config(_) => Self::Config,
            Error::NonFinite(_) => Self::NonFinite,
            Error::Data(_) => Self::Data,
            Error::Io(_) => Self::Io,
        }
    }
}

/// A loaded separation model.
pub struct HtdModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: HtdStatus, msg: impl Into<String>) -> HtdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

struct Failure(HtdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(HtdStatus::from(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(HtdStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(HtdStatus::NullPointer, format!("{what} is null"))
}

/// Runs `body`, recording any failure or panic for [`htd_last_error`].
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> HtdStatus {
    LAST_ERROR.with(|e| e.borrow_mut().clear());
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => HtdStatus::Ok,
        Ok(Err(Failure(status, msg))) => fail(status, msg),
        Err(_) => fail(HtdStatus::Panic, "internal panic"),
    }
}

unsafe fn model_ref<'a>(model: *const HtdModel) -> Result<&'a Model, Failure> {
    model.as_ref().map(|m| &m.model).ok_or_else(|| null("model"))
}

/// Reads `channels * frames` planar samples into a clip.
unsafe fn clip_from(
    samples: *const f32,
    channels: usize,
    frames: usize,
    sample_rate: u32,
) -> Result<AudioClip, Failure> {
    if samples.is_null() {
        return Err(null("samples"));
    }
    let n = channels.checked_mul(frames).ok_or_else(|| invalid("channels * frames overflows"))?;
    let data = std::slice::from_raw_parts(samples, n);
    Ok(AudioClip::from_channels(data.chunks(frames.max(1)).take(channels).map(<[f32]>::to_vec).collect(), sample_rate)?)
}

/// Copies `text` plus a NUL into `buf`. Reports the needed size, NUL
/// included, through `needed` when it is not null.
unsafe fn write_str(text: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), Failure> {
    if let Some(n) = needed.as_mut() {
        *n = text.len() + 1;
    }
    if buf.is_null() {
        return if len == 0 { Ok(()) } else { Err(null("buffer")) };
    }
    if len < text.len() + 1 {
        return Err(Failure(HtdStatus::BufferTooSmall, format!("{} bytes needed", text.len() + 1)));
    }
    ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
    *buf.add(text.len()) = 0;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn htd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last failure message into `buf`.
///
/// # Safety
/// `buf` must be null or writable for `len` bytes; `needed` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn htd_last_error(buf: *mut c_char, len: usize, needed: *mut usize) -> HtdStatus {
    let text = LAST_ERROR.with(|e| e.borrow().clone());
    match write_str(&text, buf, len, needed) {
        Ok(()) => HtdStatus::Ok,
        Err(Failure(status, _)) => status,
    }
}

/// Loads a weight file. On success `*out` owns a handle to release with
/// [`htd_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn htd_model_load(path: *const c_char, out: *mut *mut HtdModel) -> HtdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let model = load_weights(path)?;
        *out = Box::into_raw(Box::new(HtdModel { model }));
        Ok(())
    })
}

/// Releases a handle from [`htd_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle, released at most once.
#[no_mangle]
pub unsafe extern "C" fn htd_model_free(model: *mut HtdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output sources, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn htd_model_num_sources(model: *const HtdModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.sources().len())
}

/// Sample rate the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn htd_model_sample_rate(model: *const HtdModel) -> u32 {
    model.as_ref().map_or(0, |m| m.model.sample_rate())
}

/// Name of source `index`, NUL-terminated, into `buf`.
///
/// # Safety
/// `model` must be a live handle; `buf` null or writable for `len` bytes;
/// `needed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn htd_model_source_name(
    model: *const HtdModel,
    index: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> HtdStatus {
    guard(|| {
        let model = model_ref(model)?;
        let name = model.sources().get(index).ok_or_else(|| invalid(format!("source {index} out of range")))?;
        write_str(name, buf, len, needed)
    })
}

/// Separates a planar mixture `[channels][frames]` into
/// `[sources][channels][frames]` at `output`, using overlapping chunks of
/// `chunk_seconds` with fractional `overlap`.
///
/// # Safety
/// `input` must hold `channels * frames` floats and `output` room for
/// `sources * channels * frames`.
#[no_mangle]
pub unsafe extern "C" fn htd_separate(
    model: *const HtdModel,
    input: *const f32,
    channels: usize,
    frames: usize,
    sample_rate: u32,
    chunk_seconds: f64,
    overlap: f64,
    output: *mut f32,
) -> HtdStatus {
    guard(|| {
        let model = model_ref(model)?;
        if output.is_null() {
            return Err(null("output"));
        }
        if !(chunk_seconds > 0.0) {
            return Err(invalid("chunk_seconds must be positive"));
        }
        let clip = clip_from(input, channels, frames, sample_rate)?;
        let plan = plan_chunks(frames, aligned_chunk_frames(&model.cfg, chunk_seconds), overlap)?;
        let stems = separate(model, &clip, &plan)?;
        let out = std::slice::from_raw_parts_mut(output, stems.len() * channels * frames);
        for (dst, stem) in out.chunks_mut(channels * frames).zip(&stems) {
            dst.copy_from_slice(stem.clip.samples().data());
        }
        Ok(())
    })
}

/// Per-second SDR in dB of planar `estimate` against `reference`, both
/// `[channels][frames]`. Writes up to `capacity` values and the chunk count
/// to `*count`.
///
/// # Safety
/// Both inputs must hold `channels * frames` floats; `out` must be writable
/// for `capacity` doubles and `count` writable.
#[no_mangle]
pub unsafe extern "C" fn htd_sdr_chunks(
    reference: *const f32,
    estimate: *const f32,
    channels: usize,
    frames: usize,
    sample_rate: u32,
    skip_silent: bool,
    out: *mut f64,
    capacity: usize,
    count: *mut usize,
) -> HtdStatus {
    guard(|| {
        let count = count.as_mut().ok_or_else(|| null("count"))?;
        let r = clip_from(reference, channels, frames, sample_rate)?;
        let e = clip_from(estimate, channels, frames, sample_rate)?;
        let scores = sdr_chunks(&r, &e, SdrOptions { skip_silent })?;
        *count = scores.len();
        if scores.len() > capacity {
            return Err(Failure(HtdStatus::BufferTooSmall, format!("{} chunks, capacity {capacity}", scores.len())));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, scores.len()).copy_from_slice(&scores);
        Ok(())
    })
}
