//! C interface to the noise-bank transmitter and receiver.
//!
//! Objects cross the boundary as opaque handles created by `*_new`, `*_build`
//! or `*_load` and released with the matching `*_free`. Every fallible call
//! returns an [`NrdStatus`]; on failure a message is kept per thread and can
//! be read with [`nrd_last_error`]. Output buffers follow one convention: the
//! caller passes a capacity, the library always writes the required length,
//! and returns `NRD_STATUS_BUFFER_TOO_SMALL` without touching the buffer when
//! the capacity is short.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use nrdiff::bank::{build_bank, load_bank, save_bank, select_noise, BankFileMode, NoiseBank};
use nrdiff::channel::{decode_packet, pack_bits, unpack_bits, Code, CodecConfig};
use nrdiff::denoiser::load_checkpoint;
use nrdiff::diffusion::{NoiseSchedule, ScheduleKind};
use nrdiff::pipeline::{rx, tx, IndexPolicy, RxConfig, RxInit, TxConfig};
use nrdiff::semantics::NUM_CLASSES;
use nrdiff::{DenoiserModel, Error, Shape, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NrdStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    InvalidConfig = 2,
    /// A file or packet was malformed.
    Format = 3,
    /// The packet header could not be recovered.
    PacketLost = 4,
    OutOfRange = 5,
    Io = 6,
    BufferTooSmall = 7,
    Diverged = 8,
    /// A path was not valid UTF-8.
    InvalidString = 9,
    /// The library panicked; the message holds the panic text.
    Internal = 10,
}

/// Channel code settings. Repetition factors must be odd; 1 means uncoded.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NrdCodec {
    pub strong_repeat: u32,
    pub weak_repeat: u32,
    pub run_length: bool,
}

/// Shared set of seed-reproducible Gaussian noise vectors.
pub struct NrdBank(NoiseBank);

/// Variance schedule of the diffusion process.
pub struct NrdSchedule(NoiseSchedule);

/// Trained denoiser loaded from a checkpoint.
pub struct NrdModel(DenoiserModel);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

enum Failure {
    Null(&'static str),
    Utf8,
    Small,
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn status_of(e: &Error) -> NrdStatus {
    match e.root() {
        Error::InvalidConfig(_) | Error::ShapeMismatch { .. } => NrdStatus::InvalidConfig,
        Error::OutOfRange { .. } => NrdStatus::OutOfRange,
        Error::Format(_) => NrdStatus::Format,
        Error::PacketLost(_) => NrdStatus::PacketLost,
        Error::Diverged { .. } => NrdStatus::Diverged,
        Error::Io(_) => NrdStatus::Io,
        Error::Stage { .. } => NrdStatus::Internal,
    }
}

fn set_error(msg: String) {
    LAST_ERROR.with(|m| *m.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NrdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            NrdStatus::Ok
        }
        Ok(Err(fail)) => {
            let (status, msg) = match fail {
                Failure::Null(what) => (NrdStatus::NullArgument, format!("{what} is null")),
                Failure::Utf8 => (NrdStatus::InvalidString, "path is not valid UTF-8".to_string()),
                Failure::Small => (NrdStatus::BufferTooSmall, "output buffer too small".to_string()),
                Failure::Lib(e) => (status_of(&e), e.to_string()),
            };
            set_error(msg);
            status
        }
        Err(panic) => {
            let text = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(format!("internal error: {text}"));
            NrdStatus::Internal
        }
    }
}

unsafe fn href<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut T, value: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8)?;
    Ok(PathBuf::from(s))
}

/// Writes `data` to `out` if `cap` allows; the needed length always goes to `out_len`.
unsafe fn copy_out<T: Copy>(data: &[T], out: *mut T, cap: usize, out_len: *mut usize) -> Result<(), Failure> {
    put(out_len, data.len(), "out_len")?;
    if data.len() > cap {
        return Err(Failure::Small);
    }
    if !data.is_empty() {
        if out.is_null() {
            return Err(Failure::Null("output buffer"));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    }
    Ok(())
}

fn code(factor: u32) -> Result<Code, Failure> {
    match factor {
        1 => Ok(Code::None),
        n if n % 2 == 1 => Ok(Code::Repetition(n as usize)),
        n => Err(Error::config(format!("repetition factor must be odd, got {n}")).into()),
    }
}

unsafe fn codec_arg(p: *const NrdCodec) -> Result<CodecConfig, Failure> {
    match p.as_ref() {
        None => Ok(CodecConfig::default()),
        Some(c) => Ok(CodecConfig {
            strong: code(c.strong_repeat)?,
            weak: code(c.weak_repeat)?,
            run_length: c.run_length,
        }),
    }
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nrd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `cap` bytes. Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn nrd_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|m| {
        let msg = m.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Codec used when a null codec pointer is passed: strong 5x repetition on
/// header and condition, uncoded index, no run-length coding.
#[no_mangle]
pub extern "C" fn nrd_codec_default() -> NrdCodec {
    NrdCodec {
        strong_repeat: 5,
        weak_repeat: 1,
        run_length: false,
    }
}

/// Linear variance schedule with `steps` steps.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nrd_schedule_new(
    steps: u32,
    beta_start: f64,
    beta_end: f64,
    out: *mut *mut NrdSchedule,
) -> NrdStatus {
    guard(|| {
        let s = NoiseSchedule::new(steps as usize, ScheduleKind::Linear, beta_start, beta_end)?;
        put(out, boxed(NrdSchedule(s)), "out")
    })
}

/// Cumulative product `ᾱ_t` for `t` in `1..=steps`.
///
/// # Safety
/// `schedule` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nrd_schedule_alpha_bar(schedule: *const NrdSchedule, t: u32, out: *mut f64) -> NrdStatus {
    guard(|| {
        let s = &href(schedule, "schedule")?.0;
        if t == 0 || t as usize > s.steps() {
            return Err(Error::OutOfRange {
                what: "step",
                value: t as u64,
                range: format!("1..={}", s.steps()),
            }
            .into());
        }
        put(out, s.alpha_bar(t as usize), "out")
    })
}

/// # Safety
/// `schedule` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn nrd_schedule_free(schedule: *mut NrdSchedule) {
    free(schedule)
}

/// Builds `size` vectors of shape `channels × height × width` from `seed`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nrd_bank_build(
    seed: u64,
    size: usize,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut *mut NrdBank,
) -> NrdStatus {
    guard(|| {
        let bank = build_bank(seed, size, Shape::new(channels, height, width))?;
        put(out, boxed(NrdBank(bank)), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nrd_bank_load(path: *const c_char, out: *mut *mut NrdBank) -> NrdStatus {
    guard(|| {
        let bank = load_bank(&path_arg(path)?)?;
        put(out, boxed(NrdBank(bank)), "out")
    })
}

/// Saves the bank; with `full_vectors` false only the seed and shape are
/// written and vectors are regenerated on load.
///
/// # Safety
/// `bank` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn nrd_bank_save(bank: *const NrdBank, path: *const c_char, full_vectors: bool) -> NrdStatus {
    guard(|| {
        let bank = &href(bank, "bank")?.0;
        let mode = if full_vectors {
            BankFileMode::FullVectors
        } else {
            BankFileMode::SeedOnly
        };
        save_bank(bank, &path_arg(path)?, mode)?;
        Ok(())
    })
}

/// Number of vectors.
///
/// # Safety
/// `bank` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nrd_bank_len(bank: *const NrdBank, out: *mut usize) -> NrdStatus {
    guard(|| put(out, href(bank, "bank")?.0.len(), "out"))
}

/// Copies vector `index` (length `C·H·W`).
///
/// # Safety
/// `out` must be null or hold `cap` floats; `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nrd_bank_vector(
    bank: *const NrdBank,
    index: usize,
    out: *mut f32,
    cap: usize,
    out_len: *mut usize,
) -> NrdStatus {
    guard(|| {
        let v = href(bank, "bank")?.0.vector(index)?;
        copy_out(v, out, cap, out_len)
    })
}

/// # Safety
/// `bank` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn nrd_bank_free(bank: *mut NrdBank) {
    free(bank)
}

unsafe fn image_arg(data: *const f64, len: usize, shape: Shape) -> Result<Tensor, Failure> {
    let pixels = input(data, len, "image")?;
    Ok(Tensor::from_vec(shape, pixels.to_vec())?)
}

/// Bank index whose step-T latent radius is closest to the Gaussian radius
/// of the bank shape. `image` is `C·H·W` values in [−1, 1], channel-major.
///
/// # Safety
/// Handles must come from this library; `image` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn nrd_select_noise(
    bank: *const NrdBank,
    schedule: *const NrdSchedule,
    image: *const f64,
    len: usize,
    out_index: *mut usize,
) -> NrdStatus {
    guard(|| {
        let bank = &href(bank, "bank")?.0;
        let schedule = &href(schedule, "schedule")?.0;
        let x0 = image_arg(image, len, bank.shape())?;
        put(out_index, select_noise(bank, &x0, schedule)?.best_index, "out_index")
    })
}

/// Encodes an image into a packet: the semantic condition extracted from
/// `labels` (one per pixel, `< num_classes`, where 0 selects the default
/// class count) plus the selected bank index.
/// The packet is written as bytes, MSB first, zero-padded to a byte.
///
/// # Safety
/// Handles must come from this library; `image` holds `image_len` values,
/// `labels` holds `labels_len` bytes, `packet` holds `cap` bytes or is null.
#[no_mangle]
pub unsafe extern "C" fn nrd_tx(
    bank: *const NrdBank,
    schedule: *const NrdSchedule,
    codec: *const NrdCodec,
    image: *const f64,
    image_len: usize,
    labels: *const u8,
    labels_len: usize,
    num_classes: u32,
    edge_threshold: f64,
    packet: *mut u8,
    cap: usize,
    out_len: *mut usize,
    out_index: *mut usize,
) -> NrdStatus {
    guard(|| {
        let bank = &href(bank, "bank")?.0;
        let schedule = &href(schedule, "schedule")?.0;
        let x0 = image_arg(image, image_len, bank.shape())?;
        let labels = input(labels, labels_len, "labels")?;
        let config = TxConfig {
            codec: codec_arg(codec)?,
            edge_threshold,
            num_classes: if num_classes == 0 { NUM_CLASSES } else { num_classes as usize },
            index_policy: IndexPolicy::Selected,
        };
        let sent = tx(&x0, labels, bank, schedule, &config)?;
        copy_out(&pack_bits(&sent.bits), packet, cap, out_len)?;
        if !out_index.is_null() {
            out_index.write(sent.index);
        }
        Ok(())
    })
}

/// Decodes packet bytes without regenerating, reporting the index and the
/// announced bank size.
///
/// # Safety
/// `packet` must hold `len` bytes; output pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn nrd_packet_decode(
    packet: *const u8,
    len: usize,
    codec: *const NrdCodec,
    out_index: *mut usize,
    out_bank_size: *mut usize,
) -> NrdStatus {
    guard(|| {
        let bytes = input(packet, len, "packet")?;
        let d = decode_packet(&unpack_bits(bytes), &codec_arg(codec)?)?;
        put(out_index, d.index, "out_index")?;
        if !out_bank_size.is_null() {
            out_bank_size.write(d.bank_size);
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nrd_model_load(path: *const c_char, out: *mut *mut NrdModel) -> NrdStatus {
    guard(|| {
        let model = load_checkpoint(&path_arg(path)?)?;
        put(out, boxed(NrdModel(model)), "out")
    })
}

/// Image shape the model was trained on.
///
/// # Safety
/// `model` must come from this library; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn nrd_model_shape(
    model: *const NrdModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> NrdStatus {
    guard(|| {
        let s = href(model, "model")?.0.config().image_shape();
        put(channels, s.channels, "channels")?;
        put(height, s.height, "height")?;
        put(width, s.width, "width")
    })
}

/// New handle holding a copy of the model's schedule.
///
/// # Safety
/// `model` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nrd_model_schedule(model: *const NrdModel, out: *mut *mut NrdSchedule) -> NrdStatus {
    guard(|| {
        let s = href(model, "model")?.0.schedule().clone();
        put(out, boxed(NrdSchedule(s)), "out")
    })
}

/// # Safety
/// `model` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn nrd_model_free(model: *mut NrdModel) {
    free(model)
}

/// Decodes a packet and regenerates the image by reverse diffusion from the
/// indexed bank vector. Writes `C·H·W` values in [−1, 1].
///
/// # Safety
/// Handles must come from this library; `packet` holds `len` bytes; `image`
/// holds `cap` values or is null; `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nrd_rx(
    model: *const NrdModel,
    bank: *const NrdBank,
    codec: *const NrdCodec,
    packet: *const u8,
    len: usize,
    sampler_seed: u64,
    image: *mut f64,
    cap: usize,
    out_len: *mut usize,
    out_index: *mut usize,
) -> NrdStatus {
    guard(|| {
        let model = &href(model, "model")?.0;
        let bank = &href(bank, "bank")?.0;
        let needed = bank.shape().numel();
        put(out_len, needed, "out_len")?;
        if cap < needed {
            return Err(Failure::Small);
        }
        let bytes = input(packet, len, "packet")?;
        let config = RxConfig {
            codec: codec_arg(codec)?,
            init: RxInit::DroppedTerm,
            sampler_seed,
        };
        let result = rx(&unpack_bits(bytes), bank, model, model.schedule(), &config)?;
        copy_out(result.image.data(), image, cap, out_len)?;
        if !out_index.is_null() {
            out_index.write(result.index);
        }
        Ok(())
    })
}
