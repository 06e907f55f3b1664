#ifndef PQTT_H
#define PQTT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum PqttStatus {
  PQTT_STATUS_OK = 0,
  PQTT_STATUS_NULL_POINTER = 1,
  PQTT_STATUS_INVALID_ARGUMENT = 2,
  PQTT_STATUS_IO = 3,
  PQTT_STATUS_CRYPTO = 4,
  PQTT_STATUS_VERIFY_FAILED = 5,
  PQTT_STATUS_BUFFER_TOO_SMALL = 6,
  PQTT_STATUS_CONNECT_FAILED = 7,
  PQTT_STATUS_REJECTED = 8,
  PQTT_STATUS_TIMEOUT = 9,
  PQTT_STATUS_PANIC = 10,
} PqttStatus;

/**
 * Opaque certificate.
 */
typedef struct PqttCertificate PqttCertificate;

/**
 * Opaque connected client session.
 */
typedef struct PqttClient PqttClient;

/**
 * Opaque key pair.
 */
typedef struct PqttKeyPair PqttKeyPair;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Length in bytes of the calling thread's last error message, excluding the
 * terminating NUL.
 */
size_t pqtt_last_error_length(void);

/**
 * Copies the last error message, NUL-terminated and truncated to fit.
 * Returns the number of bytes written excluding the NUL.
 *
 * # Safety
 * `buf` must be valid for `capacity` bytes of writes, or NULL when
 * `capacity` is 0.
 */
size_t pqtt_last_error_message(char *buf, size_t capacity);

/**
 * Generates a key pair for `scheme` ("falcon-1024" or "rsa-2048").
 *
 * # Safety
 * `scheme` must be a NUL-terminated string and `out` a writable pointer.
 */
enum PqttStatus pqtt_keypair_generate(const char *scheme, struct PqttKeyPair **out);

/**
 * Loads a secret key file written by `pqtt ca init` or `pqtt ca issue`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum PqttStatus pqtt_keypair_load(const char *path, struct PqttKeyPair **out);

/**
 * # Safety
 * `kp` must come from this library and not have been freed; NULL is ignored.
 */
void pqtt_keypair_free(struct PqttKeyPair *kp);

/**
 * # Safety
 * `kp` must be a live handle; `out` must be valid for `capacity` bytes.
 */
enum PqttStatus pqtt_keypair_public_key(const struct PqttKeyPair *kp,
                                        uint8_t *out,
                                        size_t capacity,
                                        size_t *out_len);

/**
 * Signs `message` with the key pair.
 *
 * # Safety
 * `kp` must be a live handle, `message` valid for `message_len` bytes and
 * `signature` valid for `capacity` bytes.
 */
enum PqttStatus pqtt_sign(const struct PqttKeyPair *kp,
                          const uint8_t *message,
                          size_t message_len,
                          uint8_t *signature,
                          size_t capacity,
                          size_t *out_len);

/**
 * Returns `PQTT_STATUS_OK` when the signature verifies and
 * `PQTT_STATUS_VERIFY_FAILED` when it does not.
 *
 * # Safety
 * String and buffer arguments must be valid for their stated lengths.
 */
enum PqttStatus pqtt_verify(const char *scheme,
                            const uint8_t *public_key,
                            size_t public_key_len,
                            const uint8_t *message,
                            size_t message_len,
                            const uint8_t *signature,
                            size_t signature_len);

/**
 * Reads a certificate file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum PqttStatus pqtt_certificate_load(const char *path, struct PqttCertificate **out);

/**
 * # Safety
 * `cert` must come from this library and not have been freed; NULL is ignored.
 */
void pqtt_certificate_free(struct PqttCertificate *cert);

/**
 * Copies the certificate subject (not NUL-terminated).
 *
 * # Safety
 * `cert` must be a live handle; `out` must be valid for `capacity` bytes.
 */
enum PqttStatus pqtt_certificate_subject(const struct PqttCertificate *cert,
                                         uint8_t *out,
                                         size_t capacity,
                                         size_t *out_len);

/**
 * Checks `cert` against `trust_root` at `now_secs` (Unix seconds).
 *
 * # Safety
 * Both handles must be live.
 */
enum PqttStatus pqtt_certificate_verify(const struct PqttCertificate *cert,
                                        const struct PqttCertificate *trust_root,
                                        uint64_t now_secs);

/**
 * Connects to a broker using `<cert_dir>/<subject>.cert`,
 * `<cert_dir>/<subject>.key` and `<cert_dir>/ca.cert`. The client id is the
 * subject.
 *
 * # Safety
 * String arguments must be NUL-terminated and `out` a writable pointer.
 */
enum PqttStatus pqtt_client_connect(const char *host,
                                    uint16_t port,
                                    const char *cert_dir,
                                    const char *subject,
                                    struct PqttClient **out);

/**
 * Publishes a signed message and blocks until the broker acknowledges it
 * (QoS 1 and 2). Writes the envelope sequence number to `out_sequence` when
 * it is not NULL.
 *
 * # Safety
 * `client` must be a live handle, `topic` NUL-terminated and `payload`
 * valid for `payload_len` bytes.
 */
enum PqttStatus pqtt_client_publish(const struct PqttClient *client,
                                    const char *topic,
                                    const uint8_t *payload,
                                    size_t payload_len,
                                    uint8_t qos,
                                    uint64_t *out_sequence);

/**
 * Disconnects and releases the client.
 *
 * # Safety
 * `client` must come from [`pqtt_client_connect`] and not have been freed;
 * NULL is ignored.
 */
void pqtt_client_free(struct PqttClient *client);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PQTT_H */
