//! C ABI over the ternary-spike library.
//!
//! Every function returns a [`TsStatus`]; on failure the message is kept per
//! thread and can be copied out with [`ts_last_error_message`]. Networks are
//! opaque handles created by [`ts_network_load`] and released with
//! [`ts_network_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ternary_spike::analysis::{capacity, entropy};
use ternary_spike::energy::{estimate_from_counts, implied_ann_additions, CostTable, OpCounts};
use ternary_spike::network::{ForwardOptions, Network};
use ternary_spike::reparam::{compare, fold_amplitudes};
use ternary_spike::training::Checkpoint;
use ternary_spike::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Dimension = 6,
    Contract = 7,
    Conversion = 8,
    Verification = 9,
    Divergence = 10,
    Serialization = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

/// Opaque network handle.
pub struct TsNetwork {
    net: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> TsStatus {
    match err {
        Error::Dimension { .. } => TsStatus::Dimension,
        Error::Config(_) => TsStatus::Config,
        Error::Contract(_) => TsStatus::Contract,
        Error::Format { .. } => TsStatus::Format,
        Error::Conversion(_) => TsStatus::Conversion,
        Error::Verification(_) => TsStatus::Verification,
        Error::Divergence { .. } => TsStatus::Divergence,
        Error::Io(_) => TsStatus::Io,
        Error::Serde(_) => TsStatus::Serialization,
    }
}

struct Fail(TsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TsStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            TsStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Copies the calling thread's last error message, NUL-terminated, into
/// `buf`. Returns the message length without the terminator; if that is
/// `>= len` the copy was truncated.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ts_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_network_load(path: *const c_char, out: *mut *mut TsNetwork) -> TsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let net = Checkpoint::load(path)?.network()?;
        *out = Box::into_raw(Box::new(TsNetwork { net }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `net` must come from [`ts_network_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ts_network_free(net: *mut TsNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of `f32` values in one input sample.
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_network_input_len(net: *const TsNetwork, out: *mut usize) -> TsStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        write_out(out, net.net.spec().input_shape.iter().product(), "out")
    })
}

/// Number of output classes.
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_network_num_classes(net: *const TsNetwork, out: *mut usize) -> TsStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        write_out(out, net.net.spec().num_classes(), "out")
    })
}

/// Runs `samples` inputs (row-major, `samples * input_len` values) and
/// writes `samples * num_classes` logits. `sparsity` receives the overall
/// firing rate when non-null.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ts_network_forward(
    net: *const TsNetwork,
    input: *const f32,
    samples: usize,
    logits: *mut f32,
    logits_len: usize,
    sparsity: *mut f64,
) -> TsStatus {
    guard(|| {
        let net = &net.as_ref().ok_or_else(|| null("net"))?.net;
        if samples == 0 {
            return Err(Fail(TsStatus::InvalidArgument, "samples must be positive".into()));
        }
        let sample_shape = &net.spec().input_shape;
        let per: usize = sample_shape.iter().product();
        let data = slice_arg(input, samples * per, "input")?;
        let need = samples * net.spec().num_classes();
        if logits.is_null() {
            return Err(null("logits"));
        }
        if logits_len < need {
            return Err(Fail(
                TsStatus::BufferTooSmall,
                format!("logits buffer holds {logits_len} values, {need} needed"),
            ));
        }
        let mut shape = vec![samples];
        shape.extend_from_slice(sample_shape);
        let x = Tensor::new(shape, data.to_vec())?;
        let (out, record) = net.forward(&x, ForwardOptions::eval())?;
        ptr::copy_nonoverlapping(out.data().as_ptr(), logits, need);
        if !sparsity.is_null() {
            *sparsity = record.overall_sparsity();
        }
        Ok(())
    })
}

/// Folds trainable amplitudes of the checkpoint at `input_path`, checks the
/// result on `probe_samples` caller-supplied inputs and, if every logit is
/// within `tolerance`, saves it to `output_path`. `max_deviation` receives
/// the largest absolute logit difference either way.
///
/// # Safety
/// Paths must be NUL-terminated; `probe` must hold
/// `probe_samples * input_len` values.
#[no_mangle]
pub unsafe extern "C" fn ts_convert_checkpoint(
    input_path: *const c_char,
    output_path: *const c_char,
    probe: *const f32,
    probe_samples: usize,
    tolerance: f64,
    max_deviation: *mut f64,
) -> TsStatus {
    guard(|| {
        let input_path = path_arg(input_path, "input_path")?;
        let output_path = path_arg(output_path, "output_path")?;
        if !(tolerance >= 0.0) || probe_samples == 0 {
            return Err(Fail(
                TsStatus::InvalidArgument,
                "tolerance must be >= 0 and probe_samples positive".into(),
            ));
        }
        let original = Checkpoint::load(input_path)?;
        let (converted, _) = fold_amplitudes(&original)?;
        let net = original.network()?;
        let per: usize = net.spec().input_shape.iter().product();
        let data = slice_arg(probe, probe_samples * per, "probe")?;
        let mut shape = vec![probe_samples];
        shape.extend_from_slice(&net.spec().input_shape);
        let x = Tensor::new(shape, data.to_vec())?;
        let report = compare(&net, &converted.network()?, &x, tolerance)?;
        if !max_deviation.is_null() {
            *max_deviation = report.max_logit_deviation.unwrap_or(f64::NAN);
        }
        if report.passed != Some(true) {
            let at = report.first_divergence.unwrap_or_else(|| "unknown layer".into());
            return Err(Fail(TsStatus::Verification, format!("converted network deviates; first divergence: {at}")));
        }
        converted.save(output_path)?;
        Ok(())
    })
}

/// Energy in joules with the default per-operation costs.
///
/// # Safety
/// `out_joules` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_energy(flops: f64, sops: f64, signs: f64, out_joules: *mut f64) -> TsStatus {
    let cost = CostTable::default();
    ts_energy_with_costs(flops, sops, signs, cost.flop, cost.sop, cost.sign, out_joules)
}

/// Energy in joules with explicit per-operation costs (joules each).
///
/// # Safety
/// `out_joules` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_energy_with_costs(
    flops: f64,
    sops: f64,
    signs: f64,
    e_flop: f64,
    e_sop: f64,
    e_sign: f64,
    out_joules: *mut f64,
) -> TsStatus {
    guard(|| {
        let cost = CostTable {
            flop: e_flop,
            sop: e_sop,
            sign: e_sign,
        };
        let counts = OpCounts {
            flops,
            sops,
            signs,
            sparsity: None,
            timesteps: None,
        };
        let report = estimate_from_counts(&counts, &cost)?;
        write_out(out_joules, report.total_energy, "out_joules")
    })
}

/// Additions of the equivalent non-spiking network implied by
/// `sops = sparsity * timesteps * A`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_implied_ann_additions(sops: f64, sparsity: f64, timesteps: f64, out: *mut f64) -> TsStatus {
    guard(|| write_out(out, implied_ann_additions(sops, sparsity, timesteps)?, "out"))
}

/// Information capacity in bits of a feature map of the given shape whose
/// elements take `alphabet` values.
///
/// # Safety
/// `shape` must hold `rank` values; `out_bits` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_capacity_bits(
    shape: *const usize,
    rank: usize,
    alphabet: usize,
    out_bits: *mut f64,
) -> TsStatus {
    guard(|| {
        let shape = slice_arg(shape, rank, "shape")?;
        write_out(out_bits, capacity(shape, alphabet)?, "out_bits")
    })
}

/// Shannon entropy in bits of a probability vector.
///
/// # Safety
/// `p` must hold `len` values; `out_bits` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_entropy_bits(p: *const f64, len: usize, out_bits: *mut f64) -> TsStatus {
    guard(|| {
        let p = slice_arg(p, len, "p")?;
        write_out(out_bits, entropy(p)?, "out_bits")
    })
}
