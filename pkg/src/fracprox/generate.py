"""Seeded random instances for the three benchmark families.

Every generator takes a root seed and draws from a stream derived from
``(seed, label)``, so the matrix, signal and noise of one trial are mutually
independent and fixed individually: changing how noise is drawn never alters
the sensing matrix. Streams use numpy's PCG64 bit generator seeded through
``SeedSequence``.

Families
--------
robust
    Gaussian matrix with ``p + d`` rows, ``d`` impulsive outliers of size 2,
    squared-distance loss with ``r = 2d``, ``lam = 0.01``.
cauchy
    Gaussian matrix, standard Cauchy noise scaled by 0.01, Lorentzian loss
    with ``gamma = 0.02``, ``lam = 40``.
dct
    Oversampled cosine matrix with coherence parameter ``F``, signal with
    dynamic range ``10**D``, quadratic loss, ``lam = 0.4``.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .models import BoxBounds, SquaredRatioModel, loss_from_kind

__all__ = [
    "RNG_NAME",
    "STREAM_LABELS",
    "GenSpec",
    "GeneratedInstance",
    "stream",
    "gen_gaussian_sensing",
    "gen_dct_sensing",
    "gen_sparse_signal",
    "gen_dynamic_range_signal",
    "gen_cauchy_noise",
    "gen_robust_instance",
    "gen_cauchy_instance",
    "gen_gaussian_dct_instance",
    "generate",
    "save_instance",
    "load_instance",
    "InstanceFileError",
]

RNG_NAME = "PCG64"
STREAM_LABELS = {"matrix": 1, "signal": 2, "noise": 3, "impulse": 4}
FAMILIES = ("robust", "cauchy", "dct")

NOISE_LEVEL = 0.01
ROBUST_LAMBDA = 0.01
CAUCHY_LAMBDA = 40.0
CAUCHY_GAMMA = 0.02
DCT_LAMBDA = 0.4
DCT_N, DCT_M = 1024, 64


def stream(seed, label):
    """Independent generator for one labelled component of a trial."""
    if seed < 0 or seed >= 2 ** 64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    ss = np.random.SeedSequence([int(seed), STREAM_LABELS[label]])
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class GenSpec:
    """Family selector plus scale parameters and seed.

    `scale` is the multiplier ``i`` for the robust and cauchy families;
    `K`, `F`, `D` are used only by the dct family.
    """

    family: str
    seed: int
    scale: Optional[int] = None
    K: Optional[int] = None
    F: Optional[float] = None
    D: Optional[float] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.family in ("robust", "cauchy"):
            if self.scale is None or int(self.scale) != self.scale or self.scale < 1:
                raise ValueError(f"family {self.family} needs a positive integer scale i")
        else:
            if self.K is None or self.F is None or self.D is None:
                raise ValueError("family dct needs K, F and D")
            if not (0 < self.K <= DCT_N) or self.F <= 0 or self.D < 0:
                raise ValueError("dct requires 0 < K <= n, F > 0, D >= 0")

    @property
    def dims(self):
        """``dict`` of derived dimensions (n, m, K and, for robust, p and d)."""
        i = self.scale
        if self.family == "robust":
            p, d = 720 * i, 10 * i
            return {"n": 2560 * i, "m": p + d, "p": p, "d": d, "K": 80 * i}
        if self.family == "cauchy":
            return {"n": 2060 * i, "m": 720 * i, "K": 80 * i}
        return {"n": DCT_N, "m": DCT_M, "K": int(self.K)}

    def params(self):
        if self.family == "dct":
            return {"K": int(self.K), "F": float(self.F), "D": float(self.D)}
        return {"i": int(self.scale)}

    def label(self):
        if self.family == "dct":
            return f"dct(K={self.K},F={self.F:g},D={self.D:g})"
        return f"{self.family}(i={self.scale})"


@dataclass(frozen=True)
class GeneratedInstance:
    spec: GenSpec
    model: SquaredRatioModel
    x_true: np.ndarray
    noise: np.ndarray
    meta: dict = field(default_factory=dict)


def gen_gaussian_sensing(m, n, seed, normalize=True):
    """i.i.d. standard Gaussian ``m x n`` matrix with unit-norm columns."""
    if m <= 0 or n <= 0:
        raise ValueError("matrix dimensions must be positive")
    A = stream(seed, "matrix").standard_normal((m, n))
    if normalize:
        A /= np.linalg.norm(A, axis=0)
    return A


def gen_dct_sensing(m, n, coherence_F, seed):
    """Columns ``cos(2*pi*omega*j/F)/sqrt(m)`` for ``j = 1..n``, ``omega ~ U[0,1]^m``."""
    if coherence_F <= 0:
        raise ValueError("coherence parameter F must be positive")
    omega = stream(seed, "matrix").random(m)
    j = np.arange(1, n + 1)
    return np.cos(2.0 * np.pi * np.outer(omega, j) / coherence_F) / np.sqrt(m)


def _support(rng, n, K):
    if not 0 <= K <= n:
        raise ValueError("sparsity K must lie in [0, n]")
    return rng.permutation(n)[:K]


def gen_sparse_signal(n, K, seed):
    """K standard Gaussian entries at uniformly random positions."""
    rng = stream(seed, "signal")
    x = np.zeros(n)
    x[_support(rng, n, K)] = rng.standard_normal(K)
    return x


def gen_dynamic_range_signal(n, K, D, seed):
    """K entries ``sign(randn) * 10**(D*rand)`` at random positions."""
    rng = stream(seed, "signal")
    x = np.zeros(n)
    idx = _support(rng, n, K)
    signs = np.sign(rng.standard_normal(K))
    signs[signs == 0] = 1.0
    x[idx] = signs * 10.0 ** (D * rng.random(K))
    return x


def gen_cauchy_noise(m, seed):
    """Standard Cauchy draws via ``tan(pi*(u - 1/2))``."""
    u = stream(seed, "noise").random(m)
    return np.tan(np.pi * (u - 0.5))


def gen_robust_instance(i, seed, noise_level=NOISE_LEVEL, impulse_size=2.0):
    spec = GenSpec("robust", seed, scale=i)
    dm = spec.dims
    n, m, p, d, K = dm["n"], dm["m"], dm["p"], dm["d"], dm["K"]
    A = gen_gaussian_sensing(m, n, seed)
    x_true = gen_sparse_signal(n, K, seed)
    z = np.zeros(m)
    signs = np.sign(stream(seed, "impulse").standard_normal(d))
    signs[signs == 0] = 1.0
    z[p:] = impulse_size * signs
    eps = stream(seed, "noise").standard_normal(m)
    noise = -z + noise_level * eps
    b = A @ x_true + noise
    model = SquaredRatioModel(
        A, b, ROBUST_LAMBDA, BoxBounds.unbounded(n), loss_from_kind("robust", outlier_count=2 * d)
    )
    return GeneratedInstance(spec, model, x_true, noise, {"impulses": z})


def gen_cauchy_instance(i, seed, noise_level=NOISE_LEVEL):
    spec = GenSpec("cauchy", seed, scale=i)
    dm = spec.dims
    n, m, K = dm["n"], dm["m"], dm["K"]
    A = gen_gaussian_sensing(m, n, seed)
    x_true = gen_sparse_signal(n, K, seed)
    noise = noise_level * gen_cauchy_noise(m, seed)
    b = A @ x_true + noise
    model = SquaredRatioModel(
        A, b, CAUCHY_LAMBDA, BoxBounds.unbounded(n), loss_from_kind("lorentzian", gamma=CAUCHY_GAMMA)
    )
    return GeneratedInstance(spec, model, x_true, noise)


def gen_gaussian_dct_instance(K, F, D, seed, noise_level=NOISE_LEVEL):
    spec = GenSpec("dct", seed, K=K, F=F, D=D)
    A = gen_dct_sensing(DCT_M, DCT_N, F, seed)
    x_true = gen_dynamic_range_signal(DCT_N, K, D, seed)
    noise = noise_level * stream(seed, "noise").standard_normal(DCT_M)
    b = A @ x_true + noise
    model = SquaredRatioModel(A, b, DCT_LAMBDA, BoxBounds.unbounded(DCT_N), loss_from_kind("quadratic"))
    return GeneratedInstance(spec, model, x_true, noise)


def generate(spec):
    if spec.family == "robust":
        return gen_robust_instance(spec.scale, spec.seed)
    if spec.family == "cauchy":
        return gen_cauchy_instance(spec.scale, spec.seed)
    return gen_gaussian_dct_instance(spec.K, spec.F, spec.D, spec.seed)


# --- instance files -------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"FPINST01"
#   4 bytes   uint32 header length H
#   H bytes   UTF-8 JSON header: format, rng, family, params, seed, dims,
#             lam, loss, loss_params
#   body      float64 little-endian: A (m*n, row-major), b (m), x_true (n),
#             noise (m), box lower (n), box upper (n)
#   32 bytes  SHA-256 of everything above

MAGIC = b"FPINST01"


class InstanceFileError(ValueError):
    """Malformed or corrupted instance file."""


def save_instance(inst, path):
    model = inst.model
    m, n = model.shape
    header = {
        "format": 1,
        "rng": RNG_NAME,
        "family": inst.spec.family,
        "params": inst.spec.params(),
        "seed": int(inst.spec.seed),
        "dims": {"m": m, "n": n, **{k: v for k, v in inst.spec.dims.items() if k not in ("m", "n")}},
        "lam": float(model.lam),
        "loss": model.loss.kind,
        "loss_params": model.loss.params(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(hbytes)), hbytes]
    for arr in (model.A, model.b, inst.x_true, inst.noise, model.box.lower, model.box.upper):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(hashlib.sha256(payload).digest())


def load_instance(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4 + 32 or not data.startswith(MAGIC):
        raise InstanceFileError(f"{path}: not an instance file")
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise InstanceFileError(f"{path}: checksum mismatch")
    (hlen,) = struct.unpack_from("<I", payload, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(payload[start:start + hlen].decode("utf-8"))
    m, n = header["dims"]["m"], header["dims"]["n"]
    body = np.frombuffer(payload, dtype="<f8", offset=start + hlen)
    sizes = [m * n, m, n, m, n, n]
    if body.size != sum(sizes):
        raise InstanceFileError(f"{path}: body length does not match header dims")
    chunks = np.split(body.astype(float), np.cumsum(sizes)[:-1])
    A = chunks[0].reshape(m, n)
    b, x_true, noise, lower, upper = chunks[1:]
    params = header["params"]
    if header["family"] == "dct":
        spec = GenSpec("dct", header["seed"], K=params["K"], F=params["F"], D=params["D"])
    else:
        spec = GenSpec(header["family"], header["seed"], scale=params["i"])
    loss = loss_from_kind(header["loss"], **header["loss_params"])
    model = SquaredRatioModel(A, b, header["lam"], BoxBounds(lower, upper), loss)
    return GeneratedInstance(spec, model, x_true, noise, {"header": header})
