"""AES-256-GCM providers.

``hw`` delegates to OpenSSL through ``cryptography`` (AES-NI/PCLMUL where
the CPU has them).  ``sw`` is a portable numpy implementation: table-based
AES over counter blocks in bulk and GHASH by chunked Horner evaluation.
Both produce identical ciphertexts and tags.
"""

from __future__ import annotations

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthenticationFailed

KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16


class HardwareAesGcm:
    name = "hw"

    def encrypt(self, key: bytes, nonce: bytes, data, aad: bytes) -> tuple[bytes, bytes]:
        out = AESGCM(key).encrypt(nonce, data, aad)
        return out[:-TAG_SIZE], out[-TAG_SIZE:]

    def decrypt(self, key: bytes, nonce: bytes, ciphertext, aad: bytes, tag: bytes) -> bytes:
        try:
            return AESGCM(key).decrypt(nonce, bytes(ciphertext) + bytes(tag), aad)
        except InvalidTag:
            raise AuthenticationFailed("authentication tag mismatch") from None

    def encrypt_into(self, key: bytes, nonce: bytes, data, aad: bytes, out) -> None:
        """Write ciphertext followed by the tag into ``out`` (len(data) + 16 bytes)."""
        AESGCM(key).encrypt_into(nonce, data, aad, out)

    def decrypt_into(self, key: bytes, nonce: bytes, sealed, aad: bytes, out) -> None:
        """``sealed`` is ciphertext followed by the tag; plaintext goes to ``out``."""
        try:
            AESGCM(key).decrypt_into(nonce, sealed, aad, out)
        except InvalidTag:
            raise AuthenticationFailed("authentication tag mismatch") from None


# --- software provider -------------------------------------------------------


def _xtime(b: int) -> int:
    b <<= 1
    return (b ^ 0x11B) if b & 0x100 else b


def _gmul(a: int, b: int) -> int:
    r = 0
    while b:
        if b & 1:
            r ^= a
        a = _xtime(a)
        b >>= 1
    return r


def _build_sbox() -> list[int]:
    inv = [0] * 256
    for a in range(1, 256):
        for b in range(1, 256):
            if _gmul(a, b) == 1:
                inv[a] = b
                break
    sbox = []
    for a in range(256):
        x = inv[a]
        s = x
        for k in range(1, 5):
            s ^= ((x << k) | (x >> (8 - k))) & 0xFF
        sbox.append(s ^ 0x63)
    return sbox


_SBOX_LIST = _build_sbox()
_SBOX = np.array(_SBOX_LIST, dtype=np.uint32)


def _tables() -> tuple[np.ndarray, ...]:
    t0 = np.zeros(256, dtype=np.uint32)
    for a in range(256):
        s = _SBOX_LIST[a]
        t0[a] = (_gmul(s, 2) << 24) | (s << 16) | (s << 8) | _gmul(s, 3)
    t1 = (t0 >> 8) | (t0 << 24)
    t2 = (t0 >> 16) | (t0 << 16)
    t3 = (t0 >> 24) | (t0 << 8)
    return t0, t1, t2, t3


_T0, _T1, _T2, _T3 = _tables()


def expand_key(key: bytes) -> list[int]:
    """AES-256 key schedule as 60 big-endian 32-bit words."""
    if len(key) != 32:
        raise ValueError("AES-256 needs a 32-byte key")
    w = [int.from_bytes(key[i : i + 4], "big") for i in range(0, 32, 4)]
    rcon = 1
    for i in range(8, 60):
        t = w[i - 1]
        if i % 8 == 0:
            t = ((t << 8) | (t >> 24)) & 0xFFFFFFFF
            t = (
                (_SBOX_LIST[t >> 24] << 24)
                | (_SBOX_LIST[(t >> 16) & 255] << 16)
                | (_SBOX_LIST[(t >> 8) & 255] << 8)
                | _SBOX_LIST[t & 255]
            )
            t ^= rcon << 24
            rcon = _xtime(rcon)
        elif i % 8 == 4:
            t = (
                (_SBOX_LIST[t >> 24] << 24)
                | (_SBOX_LIST[(t >> 16) & 255] << 16)
                | (_SBOX_LIST[(t >> 8) & 255] << 8)
                | _SBOX_LIST[t & 255]
            )
        w.append(w[i - 8] ^ t)
    return w


def aes_encrypt_blocks(rk: list[int], blocks: np.ndarray) -> np.ndarray:
    """Encrypt an (n, 4) uint32 array of big-endian column words."""
    rk_a = np.array(rk, dtype=np.uint32)
    s0 = blocks[:, 0] ^ rk_a[0]
    s1 = blocks[:, 1] ^ rk_a[1]
    s2 = blocks[:, 2] ^ rk_a[2]
    s3 = blocks[:, 3] ^ rk_a[3]
    for r in range(1, 14):
        k = 4 * r
        t0 = _T0[s0 >> 24] ^ _T1[(s1 >> 16) & 255] ^ _T2[(s2 >> 8) & 255] ^ _T3[s3 & 255] ^ rk_a[k]
        t1 = _T0[s1 >> 24] ^ _T1[(s2 >> 16) & 255] ^ _T2[(s3 >> 8) & 255] ^ _T3[s0 & 255] ^ rk_a[k + 1]
        t2 = _T0[s2 >> 24] ^ _T1[(s3 >> 16) & 255] ^ _T2[(s0 >> 8) & 255] ^ _T3[s1 & 255] ^ rk_a[k + 2]
        t3 = _T0[s3 >> 24] ^ _T1[(s0 >> 16) & 255] ^ _T2[(s1 >> 8) & 255] ^ _T3[s2 & 255] ^ rk_a[k + 3]
        s0, s1, s2, s3 = t0, t1, t2, t3

    def last(a, b, c, d, kw):
        return (
            (_SBOX[a >> 24] << 24)
            | (_SBOX[(b >> 16) & 255] << 16)
            | (_SBOX[(c >> 8) & 255] << 8)
            | _SBOX[d & 255]
        ) ^ kw

    out = np.empty_like(blocks)
    out[:, 0] = last(s0, s1, s2, s3, rk_a[56])
    out[:, 1] = last(s1, s2, s3, s0, rk_a[57])
    out[:, 2] = last(s2, s3, s0, s1, rk_a[58])
    out[:, 3] = last(s3, s0, s1, s2, rk_a[59])
    return out


_R_HI = np.uint64(0xE1 << 56)
_ONE = np.uint64(1)
_SH63 = np.uint64(63)


def gf_mul_vec(x_hi, x_lo, y_hi, y_lo):
    """Element-wise GF(2^128) product in GCM bit order."""
    z_hi = np.zeros_like(x_hi)
    z_lo = np.zeros_like(x_lo)
    v_hi = y_hi.copy()
    v_lo = y_lo.copy()
    for i in range(128):
        if i < 64:
            bit = (x_hi >> np.uint64(63 - i)) & _ONE
        else:
            bit = (x_lo >> np.uint64(127 - i)) & _ONE
        mask = (-(bit.astype(np.int64))).view(np.uint64)
        z_hi ^= v_hi & mask
        z_lo ^= v_lo & mask
        lsb = v_lo & _ONE
        v_lo = (v_lo >> _ONE) | (v_hi << _SH63)
        v_hi = (v_hi >> _ONE) ^ (_R_HI & (-(lsb.astype(np.int64))).view(np.uint64))
    return z_hi, z_lo


class SoftwareAesGcm:
    name = "sw"
    chunk_blocks = 1 << 14

    def _blocks_u64(self, data: bytes) -> tuple[np.ndarray, np.ndarray]:
        pad = (-len(data)) % 16
        arr = np.frombuffer(bytes(data) + b"\0" * pad, dtype=">u8").astype(np.uint64)
        return arr[0::2].copy(), arr[1::2].copy()

    def _powers(self, h_hi, h_lo, k: int) -> tuple[np.ndarray, np.ndarray]:
        """H^1 .. H^k (index 0 holds H^1)."""
        p_hi = np.array([h_hi], dtype=np.uint64)
        p_lo = np.array([h_lo], dtype=np.uint64)
        while len(p_hi) < k:
            m = len(p_hi)
            top_hi = np.full(m, p_hi[-1], dtype=np.uint64)
            top_lo = np.full(m, p_lo[-1], dtype=np.uint64)
            n_hi, n_lo = gf_mul_vec(p_hi, p_lo, top_hi, top_lo)
            p_hi = np.concatenate([p_hi, n_hi])
            p_lo = np.concatenate([p_lo, n_lo])
        return p_hi[:k], p_lo[:k]

    def _ghash(self, h: bytes, aad: bytes, ct: bytes) -> bytes:
        h_hi = int.from_bytes(h[:8], "big")
        h_lo = int.from_bytes(h[8:], "big")
        lens = (len(aad) * 8).to_bytes(8, "big") + (len(ct) * 8).to_bytes(8, "big")
        x_hi, x_lo = self._blocks_u64(aad)
        c_hi, c_lo = self._blocks_u64(ct)
        l_hi, l_lo = self._blocks_u64(lens)
        x_hi = np.concatenate([x_hi, c_hi, l_hi])
        x_lo = np.concatenate([x_lo, c_lo, l_lo])
        k = min(self.chunk_blocks, len(x_hi))
        p_hi, p_lo = self._powers(np.uint64(h_hi), np.uint64(h_lo), k)
        y_hi = np.uint64(0)
        y_lo = np.uint64(0)
        for start in range(0, len(x_hi), k):
            b_hi = x_hi[start : start + k].copy()
            b_lo = x_lo[start : start + k].copy()
            n = len(b_hi)
            b_hi[0] ^= y_hi
            b_lo[0] ^= y_lo
            m_hi, m_lo = gf_mul_vec(b_hi, b_lo, p_hi[:n][::-1].copy(), p_lo[:n][::-1].copy())
            y_hi = np.bitwise_xor.reduce(m_hi)
            y_lo = np.bitwise_xor.reduce(m_lo)
        return int(y_hi).to_bytes(8, "big") + int(y_lo).to_bytes(8, "big")

    def _ctr(self, rk: list[int], nonce: bytes, data: bytes, first_counter: int) -> bytes:
        n = (len(data) + 15) // 16
        if n == 0:
            return b""
        iv = np.frombuffer(nonce, dtype=">u4").astype(np.uint32)
        stream = bytearray()
        for start in range(0, n, self.chunk_blocks):
            cnt = min(self.chunk_blocks, n - start)
            blocks = np.empty((cnt, 4), dtype=np.uint32)
            blocks[:, :3] = iv
            blocks[:, 3] = (np.arange(start, start + cnt, dtype=np.uint64) + first_counter).astype(
                np.uint32
            )
            ks = aes_encrypt_blocks(rk, blocks)
            stream += ks.astype(">u4").tobytes()
        ks = np.frombuffer(bytes(stream[: len(data)]), dtype=np.uint8)
        return (np.frombuffer(bytes(data), dtype=np.uint8) ^ ks).tobytes()

    def _tag(self, rk: list[int], nonce: bytes, aad: bytes, ct: bytes) -> bytes:
        zero = aes_encrypt_blocks(rk, np.zeros((1, 4), dtype=np.uint32)).astype(">u4").tobytes()
        s = self._ghash(zero, aad, ct)
        j0 = np.frombuffer(nonce + b"\0\0\0\1", dtype=">u4").astype(np.uint32).reshape(1, 4)
        ekj0 = aes_encrypt_blocks(rk, j0).astype(">u4").tobytes()
        return bytes(a ^ b for a, b in zip(ekj0, s))

    def encrypt(self, key: bytes, nonce: bytes, data, aad: bytes) -> tuple[bytes, bytes]:
        if len(nonce) != NONCE_SIZE:
            raise ValueError("only 96-bit nonces are supported")
        rk = expand_key(key)
        ct = self._ctr(rk, nonce, bytes(data), 2)
        return ct, self._tag(rk, nonce, aad, ct)

    def decrypt(self, key: bytes, nonce: bytes, ciphertext, aad: bytes, tag: bytes) -> bytes:
        rk = expand_key(key)
        ct = bytes(ciphertext)
        expected = self._tag(rk, nonce, aad, ct)
        diff = 0
        for a, b in zip(expected, bytes(tag)):
            diff |= a ^ b
        if diff or len(tag) != TAG_SIZE:
            raise AuthenticationFailed("authentication tag mismatch")
        return self._ctr(rk, nonce, ct, 2)

    def encrypt_into(self, key: bytes, nonce: bytes, data, aad: bytes, out) -> None:
        ct, tag = self.encrypt(key, nonce, data, aad)
        view = memoryview(out)
        view[: len(ct)] = ct
        view[len(ct) : len(ct) + TAG_SIZE] = tag

    def decrypt_into(self, key: bytes, nonce: bytes, sealed, aad: bytes, out) -> None:
        view = memoryview(sealed)
        n = len(view) - TAG_SIZE
        memoryview(out)[:n] = self.decrypt(key, nonce, view[:n], aad, view[n:])


PROVIDERS = {"hw": HardwareAesGcm(), "sw": SoftwareAesGcm()}


def get_provider(name: str = "hw"):
    try:
        return PROVIDERS[name]
    except KeyError:
        raise ValueError(f"unknown crypto provider {name!r} (choose from {sorted(PROVIDERS)})") from None
