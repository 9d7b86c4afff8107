"""Independent reference values for the Rust test suite.

Run `python3 tools/oracle_vectors.py` and paste the output into
crates/core/tests/oracle_vectors.rs when an encoding changes.
"""
import hashlib
import hmac
import struct

import mpmath
import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

KEY = bytes(range(0x10, 0x30))  # 32 octets


def prf_symbols(key, prefix, n):
    out, block = [], 0
    while len(out) < n:
        d = hmac.new(key, prefix + struct.pack(">I", block), hashlib.sha256).digest()
        for byte in d:
            for bit in range(7, -1, -1):
                if len(out) < n:
                    out.append(-1 if (byte >> bit) & 1 else 1)
        block += 1
    return out


def label(role, owner, epoch, counter=None):
    b = bytes([role]) + struct.pack(">IQ", owner, epoch)
    return b + (struct.pack(">I", counter) if counter is not None else b"")


def waiting(key, rid, epoch, n, w):
    msg = bytes([4]) + struct.pack(">IQII", rid, epoch, n, w)
    h = struct.unpack(">Q", hmac.new(key, msg, hashlib.sha256).digest()[:8])[0]
    return h % w


def sync_payload(key, iid, epoch):
    k = hmac.new(key, b"rangesim sync cipher key", hashlib.sha256).digest()[:16]
    block = struct.pack(">IQ", iid, epoch) + bytes(4)
    enc = Cipher(algorithms.AES(k), modes.ECB()).encryptor()
    return enc.update(block) + enc.finalize()


def bits(symbols):
    return "".join("1" if s < 0 else "0" for s in symbols)


def gaussian_te(b):
    mpmath.mp.dps = 50
    c = [mpmath.e ** (-((x - b) ** 2) / 2) for x in (-1, 0, 1)]
    lm, l0, lp = (mpmath.log(v) for v in c)
    return float(-(lp - lm) / (4 * l0 - 2 * lm - 2 * lp))


def xcorr(r, p):
    L = len(p)
    ep = np.sum(np.abs(p) ** 2)
    out = []
    for l in range(len(r) - L + 1):
        w = r[l:l + L]
        out.append(np.sum(w * np.conj(p)) / np.sqrt(np.sum(np.abs(w) ** 2) * ep))
    return np.array(out)


print("KEY = 0x10..0x30")
print("REQ(1,5) 96 bits:", bits(prf_symbols(KEY, label(1, 1, 5), 96)))
print("RESP(7,5,0) 96 bits:", bits(prf_symbols(KEY, label(2, 7, 5, 0), 96)))
print("RESP(7,5,1) 96 bits:", bits(prf_symbols(KEY, label(2, 7, 5, 1), 96)))
print("RESP(7,5,0) 300 bits tail:", bits(prf_symbols(KEY, label(2, 7, 5, 0), 300))[256:])
print("waits(7,5,n,1000):", [waiting(KEY, 7, 5, n, 1000) for n in range(10)])
print("sync(3,42):", sync_payload(KEY, 3, 42).hex())
for b in (-0.45, -0.3, 0.0, 0.1, 0.3, 0.49):
    print(f"gauss b={b}: {gaussian_te(b)!r}")
r = np.array([1 + 0j, 2 - 1j, -1 + 0.5j, 0.25 + 0j, 3 - 2j, -0.5 - 0.5j, 1 + 1j])
p = np.array([1 + 0j, -1 + 1j, 0.5 - 0.5j])
print("xcorr:", [(float(v.real), float(v.imag)) for v in xcorr(r, p)])
