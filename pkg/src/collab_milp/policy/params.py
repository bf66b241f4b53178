"""Parameter sets for the two policies and their binary container format.

Layout (little-endian): magic ``CSPM``; format version u32; descriptor as
u32 byte length + UTF-8 JSON; then one record per tensor until EOF: name
as u32 length + UTF-8 bytes, rank u32, dims u64 each, float64 payload.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..cuts import N_CUT_FEATURES
from ..features import N_CONS_FEATURES, N_VAR_FEATURES

MAGIC = b"CSPM"
FORMAT_VERSION = 1
DEFAULT_HIDDEN = 128


class ParamFormatError(ValueError):
    pass


class ParamVersionError(ParamFormatError):
    pass


@dataclass
class ParamSet:
    arch: dict
    tensors: dict = field(default_factory=dict)  # name -> float64 torch.Tensor
    version: str = "1"
    seed: int = 0

    @property
    def kind(self) -> str:
        return self.arch["kind"]

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def clone(self) -> "ParamSet":
        return ParamSet(dict(self.arch), {k: v.detach().clone() for k, v in self.tensors.items()},
                        self.version, self.seed)

    def requires_grad_(self, flag: bool = True) -> "ParamSet":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def equal(self, other: "ParamSet") -> bool:
        if self.arch != other.arch or self.names() != other.names():
            return False
        return all(torch.equal(self[k].detach(), other[k].detach()) for k in self.tensors)

    def high_level_names(self) -> list[str]:
        return [k for k in self.tensors if k.startswith("ratio.")]


def _graph_shapes(d: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        ("g.cons_embed.w", (N_CONS_FEATURES, d)), ("g.cons_embed.b", (d,)),
        ("g.var_embed.w", (N_VAR_FEATURES, d)), ("g.var_embed.b", (d,)),
        ("g.v2c_msg.w", (d, d)), ("g.v2c_msg.b", (d,)),
        ("g.cons_update.w", (2 * d, d)), ("g.cons_update.b", (d,)),
        ("g.c2v_msg.w", (d, d)), ("g.c2v_msg.b", (d,)),
        ("g.var_update.w", (2 * d, d)), ("g.var_update.b", (d,)),
        ("g.out.w", (2 * d, d)), ("g.out.b", (d,)),
    ]


def _gru_shapes(prefix: str, d_in: int, d: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.w_ih", (d_in, 3 * d)), (f"{prefix}.b_ih", (3 * d,)),
        (f"{prefix}.w_hh", (d, 3 * d)), (f"{prefix}.b_hh", (3 * d,)),
    ]


def param_shapes(arch: dict) -> list[tuple[str, tuple[int, ...]]]:
    d = arch["d_h"]
    shapes = _graph_shapes(d)
    if arch["kind"] == "cut":
        shapes += _gru_shapes("cut_rnn", N_CUT_FEATURES, d)
        shapes += [
            ("att.q", (d, d)), ("att.k", (d, d)), ("att.v", (d, d)),
            ("fuse.w", (2 * d, d)), ("fuse.b", (d,)),
            ("ratio.hidden.w", (2 * d, d)), ("ratio.hidden.b", (d,)),
            ("ratio.out.w", (d, 2)), ("ratio.out.b", (2,)),
            ("ptr.start", (d,)),
        ]
        shapes += _gru_shapes("ptr.cell", d, d)
        shapes += [
            ("glimpse.ref", (d, d)), ("glimpse.query", (d, d)),
            ("ptr.ref", (d, d)), ("ptr.query", (d, d)),
        ]
    elif arch["kind"] == "branch":
        shapes += [
            ("score.hidden.w", (2 * d, d)), ("score.hidden.b", (d,)),
            ("score.out.w", (d, 1)),
        ]
    else:
        raise ValueError(f"unknown policy kind {arch['kind']!r}")
    return shapes


def default_arch(kind: str, d_h: int = DEFAULT_HIDDEN, **extra) -> dict:
    arch = {"kind": kind, "d_h": int(d_h), "cons_features": N_CONS_FEATURES,
            "var_features": N_VAR_FEATURES}
    if kind == "cut":
        arch.update({"cut_features": N_CUT_FEATURES, "ratio_min": 0.0, "glimpses": 1})
    arch.update(extra)
    return arch


def init_params(kind: str, seed: int = 0, d_h: int = DEFAULT_HIDDEN, **extra) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init from a seeded generator."""
    arch = default_arch(kind, d_h, **extra)
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(arch):
        fan_in = shape[0] if len(shape) > 1 else arch["d_h"]
        bound = 1.0 / math.sqrt(fan_in)
        tensors[name] = torch.from_numpy(rng.uniform(-bound, bound, size=shape))
    return ParamSet(arch, tensors, seed=seed)


def _validate(params: ParamSet) -> None:
    expected = param_shapes(params.arch)
    if [n for n, _ in expected] != params.names():
        raise ParamFormatError("tensor names do not match the architecture")
    for name, shape in expected:
        if tuple(params[name].shape) != shape:
            raise ParamFormatError(f"{name}: shape {tuple(params[name].shape)} != {shape}")


def dump_tensors(descriptor: dict, tensors: dict) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    desc = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(desc)) + desc
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else t,
                                   dtype="<f8")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def parse_tensors(blob: bytes) -> tuple[dict, dict]:
    if blob[:4] != MAGIC:
        raise ParamFormatError("bad magic header")
    if len(blob) < 12:
        raise ParamFormatError("truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ParamVersionError(f"unsupported parameter format version {version}")
    (dlen,) = struct.unpack_from("<I", blob, 8)
    pos = 12 + dlen
    try:
        descriptor = json.loads(blob[12:pos].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParamFormatError(f"bad descriptor: {exc}") from exc
    tensors = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(blob):
                raise ParamFormatError(f"truncated tensor {name!r}")
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            tensors[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise ParamFormatError(f"truncated record: {exc}") from exc
    return descriptor, tensors


def params_to_bytes(params: ParamSet) -> bytes:
    _validate(params)
    desc = {"arch": params.arch, "version": params.version, "seed": params.seed}
    return dump_tensors(desc, params.tensors)


def params_from_bytes(blob: bytes) -> ParamSet:
    desc, arrays = parse_tensors(blob)
    try:
        arch = desc["arch"]
    except (KeyError, TypeError) as exc:
        raise ParamFormatError("descriptor has no architecture") from exc
    params = ParamSet(arch, {k: torch.from_numpy(v.copy()) for k, v in arrays.items()},
                      str(desc.get("version", "1")), int(desc.get("seed", 0)))
    _validate(params)
    return params


def save_params(params: ParamSet, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(params_to_bytes(params))
    tmp.replace(path)


def load_params(path) -> ParamSet:
    return params_from_bytes(Path(path).read_bytes())
