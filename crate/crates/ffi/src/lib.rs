//! C ABI over the `mcgm` library: load a checkpoint, predict energies and
//! forces for one molecule, inspect its cluster hierarchy.
//!
//! Every fallible call returns an [`McgmStatus`]; on failure the message is
//! available from [`mcgm_last_error_message`] on the same thread until the
//! next failing call. Handles are opaque and must be released with
//! [`mcgm_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mcgm::backbone::{read_checkpoint, Checkpoint};
use mcgm::cluster::ClusterConfig;
use mcgm::moldata::{batch, Batch, Molecule};
use mcgm::readout::predict;
use mcgm::trainer::{cluster_hierarchy, eval_hierarchy, TrainConfig};
use mcgm::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum McgmStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad sizes, element out of range, invalid geometry.
    InvalidArgument = 2,
    /// File missing or unreadable.
    Io = 3,
    /// File readable but malformed (checkpoint, JSON).
    BadInput = 4,
    /// Non-finite values in a computation.
    Numeric = 5,
    /// Output buffer too small.
    BufferTooSmall = 6,
    /// A bug inside the library; the handle should not be reused.
    Internal = 7,
}

/// A loaded checkpoint together with the clustering settings it was trained with.
pub struct McgmModel {
    ckpt: Checkpoint,
    cluster: ClusterConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> McgmStatus {
    match e {
        Error::Io { .. } => McgmStatus::Io,
        Error::Parse { .. } | Error::Data(_) | Error::Checkpoint(_) | Error::Json(_) => McgmStatus::BadInput,
        Error::Numeric(_) => McgmStatus::Numeric,
        Error::Config(_)
        | Error::Contract(_)
        | Error::Generation(_)
        | Error::Dimension { .. }
        | Error::Index { .. } => McgmStatus::InvalidArgument,
    }
}

struct Failure(McgmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: McgmStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> McgmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => McgmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            McgmStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(McgmStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mcgm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null if none failed.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn mcgm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint written by `mcgm train`. On success `*out` receives a
/// new handle owned by the caller.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mcgm_model_load(path: *const c_char, out: *mut *mut McgmModel) -> McgmStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(McgmStatus::InvalidArgument, "path is not valid UTF-8"))?;
        let ckpt = read_checkpoint(Path::new(path))?;
        let cluster = match ckpt.meta.get("train_config") {
            Some(c) => {
                serde_json::from_value::<TrainConfig>(c.clone())
                    .map_err(Error::from)?
                    .cluster
            }
            None => ClusterConfig::default(),
        };
        *out = Box::into_raw(Box::new(McgmModel { ckpt, cluster }));
        Ok(())
    })
}

/// Releases a handle from [`mcgm_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mcgm_model_free(model: *mut McgmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Largest atomic number the model accepts, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mcgm_model_max_z(model: *const McgmModel) -> usize {
    model.as_ref().map_or(0, |m| m.ckpt.model.config.max_z)
}

/// 1 if the model carries the cluster module, 0 if it is a plain backbone
/// (or the handle is null).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mcgm_model_uses_clusters(model: *const McgmModel) -> c_int {
    model.as_ref().map_or(0, |m| m.ckpt.model.uses_mcgm() as c_int)
}

/// One-molecule batch from raw arrays.
unsafe fn molecule_batch(n_atoms: usize, z: *const u32, positions: *const f64) -> Result<Batch, Failure> {
    non_null(z, "z")?;
    non_null(positions, "positions")?;
    if n_atoms == 0 {
        return Err(fail(McgmStatus::InvalidArgument, "molecule has no atoms"));
    }
    let z = std::slice::from_raw_parts(z, n_atoms).to_vec();
    let pos = std::slice::from_raw_parts(positions, 3 * n_atoms)
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let mol = Molecule::new(z, pos)?;
    Ok(batch(&[mol])?.with_graph_ids(vec![0])?)
}

/// Predicts the energy (meV) of one molecule and optionally its forces
/// (meV/Å). `z` holds `n_atoms` atomic numbers, `positions` and
/// `forces_out` hold `3 * n_atoms` row-major coordinates in Å. Pass null
/// for `forces_out` to skip forces.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `model` must be live.
#[no_mangle]
pub unsafe extern "C" fn mcgm_predict(
    model: *const McgmModel,
    n_atoms: usize,
    z: *const u32,
    positions: *const f64,
    energy_out: *mut f64,
    forces_out: *mut f64,
) -> McgmStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(energy_out, "energy_out")?;
        let m = &*model;
        let b = molecule_batch(n_atoms, z, positions)?;
        if let Some(&bad) = b.z.iter().find(|&&z| z == 0 || z as usize > m.ckpt.model.config.max_z) {
            return Err(fail(
                McgmStatus::InvalidArgument,
                format!("atomic number {bad} outside 1..={}", m.ckpt.model.config.max_z),
            ));
        }
        let h = eval_hierarchy(&m.ckpt.model, &b, &m.cluster)?;
        let p = predict(&m.ckpt.model, &b, h.as_ref(), !forces_out.is_null())?;
        *energy_out = p.energy[0];
        if let Some(f) = p.forces {
            let out = std::slice::from_raw_parts_mut(forces_out, 3 * n_atoms);
            for (dst, src) in out.chunks_exact_mut(3).zip(&f) {
                dst.copy_from_slice(src);
            }
        }
        Ok(())
    })
}

/// Cluster counts per hierarchy level for one molecule, as the model would
/// build them at inference. Writes at most `capacity` values to `sizes_out`
/// and the number of levels to `*n_levels_out`; if that exceeds `capacity`
/// the call fails with `BufferTooSmall` after setting `*n_levels_out`.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `model` must be live.
#[no_mangle]
pub unsafe extern "C" fn mcgm_cluster_sizes(
    model: *const McgmModel,
    n_atoms: usize,
    z: *const u32,
    positions: *const f64,
    sizes_out: *mut usize,
    capacity: usize,
    n_levels_out: *mut usize,
) -> McgmStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(n_levels_out, "n_levels_out")?;
        let m = &*model;
        let b = molecule_batch(n_atoms, z, positions)?;
        let sizes = cluster_hierarchy(&m.ckpt.model, &b, &m.cluster)?.level_sizes(0);
        *n_levels_out = sizes.len();
        if sizes.len() > capacity {
            return Err(fail(
                McgmStatus::BufferTooSmall,
                format!("{} levels do not fit in {capacity}", sizes.len()),
            ));
        }
        if !sizes.is_empty() {
            non_null(sizes_out, "sizes_out")?;
            std::slice::from_raw_parts_mut(sizes_out, sizes.len()).copy_from_slice(&sizes);
        }
        Ok(())
    })
}
