//! Secret key files: `"PQSK" | version u8 | scheme_id u8 | key_len u32 | key`.
//! Certificate files hold the serialized certificate as is.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use super::{Certificate, KeyPair, PkiError, SchemeId};
use crate::wire::Cursor;

pub const SECRET_KEY_MAGIC: &[u8; 4] = b"PQSK";
const SECRET_KEY_VERSION: u8 = 1;

fn io_err(path: &Path, source: std::io::Error) -> PkiError {
    PkiError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn encode(kp: &KeyPair) -> Vec<u8> {
    let secret = kp.secret_key().expose();
    let mut out = Vec::with_capacity(10 + secret.len());
    out.extend_from_slice(SECRET_KEY_MAGIC);
    out.push(SECRET_KEY_VERSION);
    out.push(kp.scheme().0);
    out.extend_from_slice(&(secret.len() as u32).to_be_bytes());
    out.extend_from_slice(secret);
    out
}

/// Writes the secret key; the file is created readable and writable by the
/// owner only. An existing file is replaced.
pub fn export_secret_key(kp: &KeyPair, path: &Path) -> Result<(), PkiError> {
    let mut opts = OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut file = opts.open(path).map_err(|e| io_err(path, e))?;
    #[cfg(unix)]
    {
        // mode() only applies on creation
        use std::os::unix::fs::PermissionsExt;
        file.set_permissions(fs::Permissions::from_mode(0o600))
            .map_err(|e| io_err(path, e))?;
    }
    file.write_all(&encode(kp)).map_err(|e| io_err(path, e))?;
    file.sync_all().map_err(|e| io_err(path, e))
}

pub fn import_secret_key(path: &Path) -> Result<KeyPair, PkiError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut c = Cursor::new(&bytes);
    let parsed = (|| {
        c.magic(SECRET_KEY_MAGIC)?;
        let version = c.u8()?;
        if version != SECRET_KEY_VERSION {
            return Err(crate::wire::WireError::Version(version));
        }
        let scheme = SchemeId(c.u8()?);
        let key = c.bytes_u32()?.to_vec();
        c.finish()?;
        Ok((scheme, key))
    })();
    let (scheme, key) =
        parsed.map_err(|e| PkiError::Format(format!("{}: {e}", path.display())))?;
    KeyPair::from_secret(scheme, key)
}

pub fn write_certificate(cert: &Certificate, path: &Path) -> Result<(), PkiError> {
    fs::write(path, cert.to_bytes()?).map_err(|e| io_err(path, e))
}

pub fn read_certificate(path: &Path) -> Result<Certificate, PkiError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Certificate::from_bytes(&bytes)
        .map_err(|e| PkiError::Format(format!("{}: {e}", path.display())))
}
