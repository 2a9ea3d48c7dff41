"""Versioned binary checkpoint container.

Layout: magic ``b"DGDM"``, u16 format version, u32 section count, then per
section a u16-prefixed UTF-8 name and a u64-prefixed payload. Payloads are
typed value trees; every integer is little-endian and every float is 32-bit,
so floats that are not exactly representable in float32 are rejected rather
than silently rounded.
"""
from __future__ import annotations

import struct
from fractions import Fraction

import numpy as np

from .generative import VaeParams
from .learner import LearnerParams
from .replay import DgmState, MemoryArch, ReplayBudget

MAGIC = b"DGDM"
FORMAT_VERSION = 1

_NONE, _TRUE, _FALSE, _INT, _BIGINT, _F32, _STR, _LIST, _DICT, _F32ARR, _I64ARR, _FRAC = range(12)
_I64_MIN, _I64_MAX = -(2**63), 2**63 - 1


class CheckpointError(ValueError):
    pass


class VersionMismatch(CheckpointError):
    def __init__(self, found: int, expected: int = FORMAT_VERSION):
        super().__init__(f"checkpoint format version {found} is not supported (this build reads version {expected})")
        self.found = found
        self.expected = expected


# --- tree encoding ------------------------------------------------------------


def _bigint_bytes(v: int) -> bytes:
    n = (v.bit_length() + 8) // 8
    return struct.pack("<I", n) + v.to_bytes(n, "little", signed=True)


def _encode(v, out: bytearray) -> None:
    if v is None:
        out.append(_NONE)
    elif isinstance(v, (bool, np.bool_)):
        out.append(_TRUE if v else _FALSE)
    elif isinstance(v, (int, np.integer)):
        v = int(v)
        if _I64_MIN <= v <= _I64_MAX:
            out.append(_INT)
            out += struct.pack("<q", v)
        else:
            out.append(_BIGINT)
            out += _bigint_bytes(v)
    elif isinstance(v, Fraction):
        out.append(_FRAC)
        out += _bigint_bytes(v.numerator) + _bigint_bytes(v.denominator)
    elif isinstance(v, (float, np.floating)):
        if float(np.float32(v)) != float(v) and not np.isnan(v):
            raise CheckpointError(f"float {v!r} is not exactly representable in 32 bits")
        out.append(_F32)
        out += struct.pack("<f", float(v))
    elif isinstance(v, str):
        raw = v.encode()
        out.append(_STR)
        out += struct.pack("<I", len(raw)) + raw
    elif isinstance(v, (list, tuple)):
        out.append(_LIST)
        out += struct.pack("<I", len(v))
        for item in v:
            _encode(item, out)
    elif isinstance(v, dict):
        out.append(_DICT)
        out += struct.pack("<I", len(v))
        for k, item in v.items():
            if not isinstance(k, str):
                raise CheckpointError(f"dict keys must be strings, got {type(k).__name__}")
            _encode(k, out)
            _encode(item, out)
    elif isinstance(v, np.ndarray):
        if v.dtype.kind == "f":
            arr = v.astype("<f4")
            if not np.array_equal(arr, v, equal_nan=True):
                raise CheckpointError("tensor holds values that are not exactly representable in 32 bits")
            out.append(_F32ARR)
        elif v.dtype.kind in "iub":
            arr = v.astype("<i8")
            out.append(_I64ARR)
        else:
            raise CheckpointError(f"unsupported tensor dtype {v.dtype}")
        out.append(arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    else:
        raise CheckpointError(f"cannot encode {type(v).__name__}")


def encode_tree(v) -> bytes:
    out = bytearray()
    _encode(v, out)
    return bytes(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        b = self.raw[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def bigint(self) -> int:
        (n,) = self.unpack("<I")
        return int.from_bytes(self.take(n), "little", signed=True)


def _decode(r: _Reader):
    (tag,) = r.unpack("<B")
    if tag == _NONE:
        return None
    if tag in (_TRUE, _FALSE):
        return tag == _TRUE
    if tag == _INT:
        return r.unpack("<q")[0]
    if tag == _BIGINT:
        return r.bigint()
    if tag == _FRAC:
        return Fraction(r.bigint(), r.bigint())
    if tag == _F32:
        return r.unpack("<f")[0]
    if tag == _STR:
        (n,) = r.unpack("<I")
        return r.take(n).decode()
    if tag == _LIST:
        (n,) = r.unpack("<I")
        return [_decode(r) for _ in range(n)]
    if tag == _DICT:
        (n,) = r.unpack("<I")
        out = {}
        for _ in range(n):
            k = _decode(r)
            out[k] = _decode(r)
        return out
    if tag in (_F32ARR, _I64ARR):
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        dt = np.dtype("<f4" if tag == _F32ARR else "<i8")
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape)
        return arr.astype(np.float32 if tag == _F32ARR else np.int64)
    raise CheckpointError(f"unknown value tag {tag}")


def decode_tree(raw: bytes):
    r = _Reader(raw)
    v = _decode(r)
    if r.pos != len(raw):
        raise CheckpointError("trailing bytes after value")
    return v


# --- container ----------------------------------------------------------------


def dumps(sections: dict) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HI", FORMAT_VERSION, len(sections))
    for name, value in sections.items():
        raw_name = name.encode()
        payload = encode_tree(value)
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<Q", len(payload)) + payload
    return bytes(out)


def loads(raw: bytes) -> dict:
    """Parse a whole container; nothing is returned unless every section decodes."""
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    r = _Reader(raw)
    r.take(4)
    version, count = r.unpack("<HI")
    if version != FORMAT_VERSION:
        raise VersionMismatch(version)
    sections = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (size,) = r.unpack("<Q")
        sections[name] = decode_tree(r.take(size))
    if r.pos != len(raw):
        raise CheckpointError("trailing bytes after last section")
    return sections


def save(path, sections: dict) -> None:
    data = dumps(sections)
    with open(path, "wb") as fh:
        fh.write(data)


def load(path) -> dict:
    with open(path, "rb") as fh:
        return loads(fh.read())


# --- model state <-> tree -----------------------------------------------------


def learner_to_tree(l: LearnerParams) -> dict:
    return {"params": dict(l.params), "input_dim": l.input_dim, "hidden": list(l.hidden),
            "num_classes": l.num_classes, "dropout_rate": l.dropout_rate}


def learner_from_tree(t: dict) -> LearnerParams:
    return LearnerParams(dict(t["params"]), t["input_dim"], tuple(t["hidden"]), t["num_classes"], t["dropout_rate"])


def vae_to_tree(v: VaeParams) -> dict:
    return {"params": dict(v.params), "input_dim": v.input_dim, "hidden": list(v.hidden), "latent_dim": v.latent_dim}


def vae_from_tree(t: dict) -> VaeParams:
    return VaeParams(dict(t["params"]), t["input_dim"], tuple(t["hidden"]), t["latent_dim"])


def arch_to_tree(a: MemoryArch) -> dict:
    return {"input_dim": a.input_dim, "num_classes": a.num_classes, "gen_hidden": list(a.gen_hidden),
            "latent_dim": a.latent_dim, "learner_hidden": list(a.learner_hidden)}


def arch_from_tree(t: dict) -> MemoryArch:
    return MemoryArch(t["input_dim"], t["num_classes"], tuple(t["gen_hidden"]), t["latent_dim"],
                      tuple(t["learner_hidden"]))


def budget_to_tree(b: ReplayBudget | None):
    return None if b is None else [b.n_tasks, b.n_gen]


def budget_from_tree(t) -> ReplayBudget | None:
    return None if t is None else ReplayBudget(t[0], t[1])


def dgm_to_tree(d: DgmState | None):
    if d is None:
        return None
    return {"generator": vae_to_tree(d.generator), "learner": learner_to_tree(d.learner),
            "dictionary": dict(d.dictionary), "age": d.age, "n_max": d.n_max, "kappa": d.kappa,
            "arch": arch_to_tree(d.arch), "generator_sample_epochs": d.generator_sample_epochs,
            "last_budget": budget_to_tree(d.last_budget)}


def dgm_from_tree(t) -> DgmState | None:
    if t is None:
        return None
    return DgmState(vae_from_tree(t["generator"]), learner_from_tree(t["learner"]), dict(t["dictionary"]),
                    t["age"], t["n_max"], t["kappa"], arch_from_tree(t["arch"]), t["generator_sample_epochs"],
                    budget_from_tree(t["last_budget"]))


def streams_to_tree(states: dict) -> dict:
    return {k: {"state": s["state"]["state"], "inc": s["state"]["inc"], "has_uint32": s["has_uint32"],
                "uinteger": s["uinteger"]} for k, s in states.items()}


def streams_from_tree(t: dict) -> dict:
    return {k: {"bit_generator": "PCG64", "state": {"state": s["state"], "inc": s["inc"]},
                "has_uint32": s["has_uint32"], "uinteger": s["uinteger"]} for k, s in t.items()}
