//! C interface to pqtt.
//!
//! Objects cross the boundary as opaque handles created by a `*_new`/`*_load`
//! call and released with the matching `*_free`. Every fallible call returns
//! a [`PqttStatus`]; on failure a description is kept per thread and can be
//! copied out with [`pqtt_last_error_message`].
//!
//! Variable-length outputs use caller buffers: the required length is always
//! written to `out_len`, and `PQTT_STATUS_BUFFER_TOO_SMALL` is returned when
//! `capacity` is short.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;
use std::sync::Arc;

use pqtt::client::{ClientConfig, ClientError, ClientSession, Credentials};
use pqtt::clock::SystemClock;
use pqtt::codec::QoS;
use pqtt::pki::{self, Certificate, KeyPair, PkiError};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PqttStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Crypto = 4,
    VerifyFailed = 5,
    BufferTooSmall = 6,
    ConnectFailed = 7,
    Rejected = 8,
    Timeout = 9,
    Panic = 10,
}

/// Opaque key pair.
pub struct PqttKeyPair(KeyPair);

/// Opaque certificate.
pub struct PqttCertificate(Certificate);

/// Opaque connected client session.
pub struct PqttClient(ClientSession);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: PqttStatus, message: impl Into<String>) -> PqttStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
    status
}

fn pki_status(e: PkiError) -> PqttStatus {
    let status = match e {
        PkiError::Io { .. } => PqttStatus::Io,
        PkiError::UnknownScheme(_) => PqttStatus::InvalidArgument,
        PkiError::Verify(_) => PqttStatus::VerifyFailed,
        _ => PqttStatus::Crypto,
    };
    fail(status, e.to_string())
}

fn client_status(e: ClientError) -> PqttStatus {
    let status = match &e {
        ClientError::Config(_) | ClientError::Topic(_) => PqttStatus::InvalidArgument,
        ClientError::Credentials(PkiError::Io { .. }) => PqttStatus::Io,
        ClientError::Credentials(_) | ClientError::Envelope(_) => PqttStatus::Crypto,
        ClientError::AuthRejected(_) | ClientError::SubscribeRejected(_) => PqttStatus::Rejected,
        ClientError::DeliveryTimeout => PqttStatus::Timeout,
        _ => PqttStatus::ConnectFailed,
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning a panic into `PQTT_STATUS_PANIC`.
fn guard(f: impl FnOnce() -> PqttStatus) -> PqttStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(PqttStatus::Panic, "internal panic"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, PqttStatus> {
    if p.is_null() {
        return Err(fail(PqttStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(PqttStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn bytes<'a>(p: *const u8, len: usize, what: &str) -> Result<&'a [u8], PqttStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(PqttStatus::NullPointer, format!("{what} is NULL")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn copy_out(src: &[u8], out: *mut u8, capacity: usize, out_len: *mut usize) -> PqttStatus {
    if out_len.is_null() {
        return fail(PqttStatus::NullPointer, "out_len is NULL");
    }
    *out_len = src.len();
    if capacity < src.len() {
        return fail(
            PqttStatus::BufferTooSmall,
            format!("need {} bytes, have {capacity}", src.len()),
        );
    }
    if !src.is_empty() {
        if out.is_null() {
            return fail(PqttStatus::NullPointer, "output buffer is NULL");
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    PqttStatus::Ok
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> PqttStatus {
    *out = Box::into_raw(Box::new(value));
    PqttStatus::Ok
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Length in bytes of the calling thread's last error message, excluding the
/// terminating NUL.
#[no_mangle]
pub extern "C" fn pqtt_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message, NUL-terminated and truncated to fit.
/// Returns the number of bytes written excluding the NUL.
///
/// # Safety
/// `buf` must be valid for `capacity` bytes of writes, or NULL when
/// `capacity` is 0.
#[no_mangle]
pub unsafe extern "C" fn pqtt_last_error_message(buf: *mut c_char, capacity: usize) -> usize {
    if buf.is_null() || capacity == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let n = msg.len().min(capacity - 1);
        ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
        *buf.add(n) = 0;
        n
    })
}

/// Generates a key pair for `scheme` ("falcon-1024" or "rsa-2048").
///
/// # Safety
/// `scheme` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pqtt_keypair_generate(scheme: *const c_char, out: *mut *mut PqttKeyPair) -> PqttStatus {
    guard(|| {
        if out.is_null() {
            return fail(PqttStatus::NullPointer, "out is NULL");
        }
        let scheme = try_ffi!(text(scheme, "scheme"));
        match pki::generate_keypair(scheme, None) {
            Ok(kp) => store(out, PqttKeyPair(kp)),
            Err(e) => pki_status(e),
        }
    })
}

/// Loads a secret key file written by `pqtt ca init` or `pqtt ca issue`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pqtt_keypair_load(path: *const c_char, out: *mut *mut PqttKeyPair) -> PqttStatus {
    guard(|| {
        if out.is_null() {
            return fail(PqttStatus::NullPointer, "out is NULL");
        }
        let path = try_ffi!(text(path, "path"));
        match pki::import_secret_key(Path::new(path)) {
            Ok(kp) => store(out, PqttKeyPair(kp)),
            Err(e) => pki_status(e),
        }
    })
}

/// # Safety
/// `kp` must come from this library and not have been freed; NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn pqtt_keypair_free(kp: *mut PqttKeyPair) {
    if !kp.is_null() {
        drop(Box::from_raw(kp));
    }
}

/// # Safety
/// `kp` must be a live handle; `out` must be valid for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn pqtt_keypair_public_key(
    kp: *const PqttKeyPair,
    out: *mut u8,
    capacity: usize,
    out_len: *mut usize,
) -> PqttStatus {
    guard(|| {
        let Some(kp) = kp.as_ref() else {
            return fail(PqttStatus::NullPointer, "key pair is NULL");
        };
        copy_out(kp.0.public_key(), out, capacity, out_len)
    })
}

/// Signs `message` with the key pair.
///
/// # Safety
/// `kp` must be a live handle, `message` valid for `message_len` bytes and
/// `signature` valid for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn pqtt_sign(
    kp: *const PqttKeyPair,
    message: *const u8,
    message_len: usize,
    signature: *mut u8,
    capacity: usize,
    out_len: *mut usize,
) -> PqttStatus {
    guard(|| {
        let Some(kp) = kp.as_ref() else {
            return fail(PqttStatus::NullPointer, "key pair is NULL");
        };
        let message = try_ffi!(bytes(message, message_len, "message"));
        match kp.0.sign(message) {
            Ok(sig) => copy_out(&sig, signature, capacity, out_len),
            Err(e) => pki_status(e),
        }
    })
}

/// Returns `PQTT_STATUS_OK` when the signature verifies and
/// `PQTT_STATUS_VERIFY_FAILED` when it does not.
///
/// # Safety
/// String and buffer arguments must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn pqtt_verify(
    scheme: *const c_char,
    public_key: *const u8,
    public_key_len: usize,
    message: *const u8,
    message_len: usize,
    signature: *const u8,
    signature_len: usize,
) -> PqttStatus {
    guard(|| {
        let scheme = try_ffi!(text(scheme, "scheme"));
        let id = match pki::scheme_by_name(scheme) {
            Ok(id) => id,
            Err(e) => return pki_status(e),
        };
        let pk = try_ffi!(bytes(public_key, public_key_len, "public_key"));
        let msg = try_ffi!(bytes(message, message_len, "message"));
        let sig = try_ffi!(bytes(signature, signature_len, "signature"));
        if pki::verify(id, pk, msg, sig) {
            PqttStatus::Ok
        } else {
            fail(PqttStatus::VerifyFailed, "signature does not verify")
        }
    })
}

/// Reads a certificate file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pqtt_certificate_load(path: *const c_char, out: *mut *mut PqttCertificate) -> PqttStatus {
    guard(|| {
        if out.is_null() {
            return fail(PqttStatus::NullPointer, "out is NULL");
        }
        let path = try_ffi!(text(path, "path"));
        match pki::read_certificate(Path::new(path)) {
            Ok(c) => store(out, PqttCertificate(c)),
            Err(e) => pki_status(e),
        }
    })
}

/// # Safety
/// `cert` must come from this library and not have been freed; NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn pqtt_certificate_free(cert: *mut PqttCertificate) {
    if !cert.is_null() {
        drop(Box::from_raw(cert));
    }
}

/// Copies the certificate subject (not NUL-terminated).
///
/// # Safety
/// `cert` must be a live handle; `out` must be valid for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn pqtt_certificate_subject(
    cert: *const PqttCertificate,
    out: *mut u8,
    capacity: usize,
    out_len: *mut usize,
) -> PqttStatus {
    guard(|| {
        let Some(cert) = cert.as_ref() else {
            return fail(PqttStatus::NullPointer, "certificate is NULL");
        };
        copy_out(cert.0.subject.as_bytes(), out, capacity, out_len)
    })
}

/// Checks `cert` against `trust_root` at `now_secs` (Unix seconds).
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn pqtt_certificate_verify(
    cert: *const PqttCertificate,
    trust_root: *const PqttCertificate,
    now_secs: u64,
) -> PqttStatus {
    guard(|| {
        let (Some(cert), Some(root)) = (cert.as_ref(), trust_root.as_ref()) else {
            return fail(PqttStatus::NullPointer, "certificate is NULL");
        };
        match pki::verify_certificate(&cert.0, &root.0, now_secs) {
            Ok(()) => PqttStatus::Ok,
            Err(e) => fail(PqttStatus::VerifyFailed, e.to_string()),
        }
    })
}

/// Connects to a broker using `<cert_dir>/<subject>.cert`,
/// `<cert_dir>/<subject>.key` and `<cert_dir>/ca.cert`. The client id is the
/// subject.
///
/// # Safety
/// String arguments must be NUL-terminated and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pqtt_client_connect(
    host: *const c_char,
    port: u16,
    cert_dir: *const c_char,
    subject: *const c_char,
    out: *mut *mut PqttClient,
) -> PqttStatus {
    guard(|| {
        if out.is_null() {
            return fail(PqttStatus::NullPointer, "out is NULL");
        }
        let host = try_ffi!(text(host, "host"));
        let dir = try_ffi!(text(cert_dir, "cert_dir"));
        let subject = try_ffi!(text(subject, "subject"));
        let config = ClientConfig::from_cert_dir(host, port, subject, Path::new(dir), subject);
        let creds = match Credentials::load(&config) {
            Ok(c) => c,
            Err(e) => return client_status(e),
        };
        match ClientSession::connect(config, creds, Arc::new(SystemClock)) {
            Ok(s) => store(out, PqttClient(s)),
            Err(e) => client_status(e),
        }
    })
}

/// Publishes a signed message and blocks until the broker acknowledges it
/// (QoS 1 and 2). Writes the envelope sequence number to `out_sequence` when
/// it is not NULL.
///
/// # Safety
/// `client` must be a live handle, `topic` NUL-terminated and `payload`
/// valid for `payload_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pqtt_client_publish(
    client: *const PqttClient,
    topic: *const c_char,
    payload: *const u8,
    payload_len: usize,
    qos: u8,
    out_sequence: *mut u64,
) -> PqttStatus {
    guard(|| {
        let Some(client) = client.as_ref() else {
            return fail(PqttStatus::NullPointer, "client is NULL");
        };
        let topic = try_ffi!(text(topic, "topic"));
        let payload = try_ffi!(bytes(payload, payload_len, "payload"));
        let Some(qos) = QoS::from_u8(qos) else {
            return fail(PqttStatus::InvalidArgument, format!("QoS {qos} out of range"));
        };
        match client.0.publish(topic, payload, qos) {
            Ok(seq) => {
                if !out_sequence.is_null() {
                    *out_sequence = seq;
                }
                PqttStatus::Ok
            }
            Err(e) => client_status(e),
        }
    })
}

/// Disconnects and releases the client.
///
/// # Safety
/// `client` must come from [`pqtt_client_connect`] and not have been freed;
/// NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn pqtt_client_free(client: *mut PqttClient) {
    if !client.is_null() {
        let client = Box::from_raw(client);
        client.0.disconnect();
    }
}
