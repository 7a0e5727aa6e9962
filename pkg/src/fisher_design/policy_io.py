"""Binary policy files.

Layout (little endian)::

    b"OEDP"                       magic
    u32  version
    u32  len(model name), bytes   model name (UTF-8)
    u32  dim
    dim x (f64 lo, f64 hi, u32 n) grid
    f64  dt_h
    u32  K, K x f64               control values
    u32  M, M x f64, M x f64      prior thetas, prior weights
    u32  n_t
    n_t * cells x u8              control indices, time-major, C-order cells
    u64  checksum                 blake2b-64 of everything above

The checksum is verified on load.
"""
from __future__ import annotations

import hashlib
import io
import struct

import numpy as np

from .dp import ControlSet, PolicyTable, PriorGrid
from .exceptions import PolicyFileError
from .mca import Grid

MAGIC = b"OEDP"
VERSION = 1


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def policy_to_bytes(policy: PolicyTable) -> bytes:
    buf = io.BytesIO()
    w = buf.write
    name = policy.model_name.encode("utf-8")
    w(MAGIC)
    w(struct.pack("<I", VERSION))
    w(struct.pack("<I", len(name)))
    w(name)
    g = policy.grid
    w(struct.pack("<I", len(g.n)))
    for lo, hi, n in zip(g.lo, g.hi, g.n):
        w(struct.pack("<ddI", lo, hi, n))
    w(struct.pack("<d", policy.dt_h))
    c = policy.controls.as_array()
    w(struct.pack("<I", c.size))
    w(c.astype("<f8").tobytes())
    p = policy.prior
    w(struct.pack("<I", len(p)))
    w(p.theta_array.astype("<f8").tobytes())
    w(p.weight_array.astype("<f8").tobytes())
    w(struct.pack("<I", policy.n_t))
    w(np.ascontiguousarray(policy.indices, dtype=np.uint8).tobytes())
    payload = buf.getvalue()
    return payload + struct.pack("<Q", _checksum(payload))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise PolicyFileError(f"policy file truncated at byte {self.pos} (need {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(float)


def policy_from_bytes(data: bytes) -> PolicyTable:
    if len(data) < 12 or data[:4] != MAGIC:
        raise PolicyFileError("not a policy file (bad magic)")
    payload, tail = data[:-8], data[-8:]
    (stored,) = struct.unpack("<Q", tail)
    if stored != _checksum(payload):
        raise PolicyFileError("policy file checksum mismatch (corrupted or truncated)")
    r = _Reader(payload)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise PolicyFileError(f"unsupported policy file version {version}")
    (name_len,) = r.unpack("<I")
    name = r.take(name_len).decode("utf-8")
    (dim,) = r.unpack("<I")
    lo, hi, n = [], [], []
    for _ in range(dim):
        a, b, k = r.unpack("<ddI")
        lo.append(a)
        hi.append(b)
        n.append(k)
    grid = Grid(tuple(lo), tuple(hi), tuple(n))
    (dt_h,) = r.unpack("<d")
    (K,) = r.unpack("<I")
    controls = ControlSet(tuple(r.f64(K)))
    (M,) = r.unpack("<I")
    thetas = r.f64(M)
    weights = r.f64(M)
    (n_t,) = r.unpack("<I")
    idx = np.frombuffer(r.take(n_t * grid.size), dtype=np.uint8).reshape(n_t, grid.size).copy()
    if r.pos != len(payload):
        raise PolicyFileError(f"{len(payload) - r.pos} unexpected trailing bytes in policy file")
    prior = PriorGrid.__new__(PriorGrid)  # weights are stored normalised; keep them bit-exact
    object.__setattr__(prior, "thetas", tuple(thetas.tolist()))
    object.__setattr__(prior, "weights", tuple(weights.tolist()))
    return PolicyTable(model_name=name, grid=grid, dt_h=dt_h, controls=controls, prior=prior, indices=idx)


def save_policy(policy: PolicyTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(policy_to_bytes(policy))


def load_policy(path, expect_model: str | None = None, expect_grid: Grid | None = None) -> PolicyTable:
    """Read a policy file; optionally require a model name and an exact grid."""
    with open(path, "rb") as fh:
        policy = policy_from_bytes(fh.read())
    if expect_model is not None and policy.model_name != expect_model:
        raise PolicyFileError(f"policy is for model {policy.model_name!r}, expected {expect_model!r}")
    if expect_grid is not None and policy.grid != expect_grid:
        raise PolicyFileError(f"policy grid {policy.grid} does not match the configured grid {expect_grid}")
    return policy


def describe(policy: PolicyTable) -> str:
    g = policy.grid
    lines = [
        f"model      {policy.model_name}",
        f"format     OEDP v{VERSION}",
        "grid       " + " x ".join(f"[{a:g}, {b:g}]/{k}" for a, b, k in zip(g.lo, g.hi, g.n))
        + f"  ({g.size} cells)",
        f"dt_h       {policy.dt_h:g}",
        f"steps      {policy.n_t}  (horizon {policy.horizon:g})",
        "controls   " + ", ".join(f"{v:g}" for v in policy.controls.values),
        f"prior      {len(policy.prior)} points on [{policy.prior.thetas[0]:g}, {policy.prior.thetas[-1]:g}]",
    ]
    counts = np.bincount(policy.indices[0], minlength=len(policy.controls))
    lines.append("t=0 usage  " + ", ".join(f"{v:g}: {c}" for v, c in zip(policy.controls.values, counts)))
    return "\n".join(lines)
