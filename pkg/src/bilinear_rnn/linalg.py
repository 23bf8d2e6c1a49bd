"""Dense float64 linear algebra for bilinear recurrences.

Conventions used throughout the package:

* vectors are 1-D ``float64`` arrays,
* matrices are 2-D ``float64`` arrays, row-major,
* three-way tensors are 3-D ``float64`` arrays with axes
  (output hidden ``H``, input hidden ``H``, input embedding ``D``);
  entry ``(i, j, k)`` sits at flat offset ``(i*d1 + j)*d2 + k`` (C order).

All randomness goes through a Philox counter-based generator, so every
stream is reproducible bit-for-bit from its seed on any platform and can
be split into independent child streams.
"""

from __future__ import annotations

import json

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Shape mismatch between operands."""


def make_rng(seed):
    """Return a Philox-backed Generator.

    ``seed`` may be an int, a SeedSequence, or an existing Generator
    (returned unchanged so call sites can accept either).
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def split_rng(rng, n):
    """Split a generator into ``n`` independent child streams."""
    return make_rng(rng).spawn(n)


def as_array(x, ndim=None, name="array"):
    a = np.asarray(x, dtype=DTYPE)
    if ndim is not None and a.ndim != ndim:
        raise DimensionError(f"{name}: expected {ndim}-d array, got shape {a.shape}")
    return a


def check_finite(a, name="array"):
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{name}: non-finite entries")
    return a


def contract_tensor(W, x):
    """Contract a three-way tensor with an input vector: A[i,j] = sum_k W[i,j,k] x[k].

    This is the input-conditioned transition matrix of the bilinear update;
    a one-hot ``x`` selects the corresponding frontal slice ``W[:, :, k]``.
    """
    W = as_array(W, 3, "W")
    x = as_array(x, 1, "x")
    if x.shape[0] != W.shape[2]:
        raise DimensionError(
            f"contract_tensor: x has length {x.shape[0]}, tensor expects {W.shape[2]}"
        )
    return W.reshape(-1, W.shape[2]).dot(x).reshape(W.shape[0], W.shape[1])


def cp_transition(Wh1, Wh2, Wx, x, h):
    """Apply the rank-R factored transition without materializing the matrix.

    Computes ``Wh1 @ ((Wx.T x) * (Wh2.T h))``, which equals
    ``(Wh1 diag(Wx.T x) Wh2.T) h``.  Cost is O(R(2H+D)) instead of O(H^2 D).
    """
    Wh1 = as_array(Wh1, 2, "Wh1")
    Wh2 = as_array(Wh2, 2, "Wh2")
    Wx = as_array(Wx, 2, "Wx")
    x = as_array(x, 1, "x")
    h = as_array(h, 1, "h")
    R = Wh1.shape[1]
    if Wh2.shape[1] != R or Wx.shape[1] != R:
        raise DimensionError(
            f"cp_transition: factor ranks differ "
            f"({Wh1.shape[1]}, {Wh2.shape[1]}, {Wx.shape[1]})"
        )
    if Wh1.shape[0] != Wh2.shape[0] or h.shape[0] != Wh2.shape[0]:
        raise DimensionError(
            f"cp_transition: hidden dims differ "
            f"(Wh1 {Wh1.shape[0]}, Wh2 {Wh2.shape[0]}, h {h.shape[0]})"
        )
    if x.shape[0] != Wx.shape[0]:
        raise DimensionError(
            f"cp_transition: x has length {x.shape[0]}, Wx expects {Wx.shape[0]}"
        )
    return Wh1.dot(Wx.T.dot(x) * Wh2.T.dot(h))


def cp_reconstruct(Wh1, Wh2, Wx):
    """Assemble the explicit tensor sum of rank-1 terms: W[i,j,k] = sum_r Wh1[i,r] Wh2[j,r] Wx[k,r].

    Brute-force companion to :func:`cp_transition`; used as a test oracle,
    not in any hot path.
    """
    return np.einsum("ir,jr,kr->ijk", Wh1, Wh2, Wx)


def rotation2(theta):
    """2x2 rotation matrix for angle ``theta`` (radians)."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=DTYPE)


def rotation_block_diag(thetas):
    """Block-diagonal matrix of 2x2 rotations, one block per angle."""
    thetas = as_array(thetas, 1, "thetas")
    H = 2 * thetas.shape[0]
    A = np.zeros((H, H), dtype=DTYPE)
    c, s = np.cos(thetas), np.sin(thetas)
    idx = np.arange(thetas.shape[0])
    A[2 * idx, 2 * idx] = c
    A[2 * idx, 2 * idx + 1] = -s
    A[2 * idx + 1, 2 * idx] = s
    A[2 * idx + 1, 2 * idx + 1] = c
    return A


def uniform_init(shape, half_width, rng):
    """I.i.d. entries uniform on [-half_width, +half_width)."""
    if half_width <= 0:
        raise ValueError(f"uniform_init: half_width must be positive, got {half_width}")
    return make_rng(rng).uniform(-half_width, half_width, size=shape)


def l2_normalize(v):
    """Rescale to unit Euclidean norm; rejects the zero vector."""
    v = as_array(v)
    n = np.linalg.norm(v)
    if n == 0.0 or not np.isfinite(n):
        raise FloatingPointError("degenerate hidden state: zero or non-finite norm")
    return v / n


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------
#
# Named-tensor text format, one file per object:
#
#   line 1: a JSON object {"meta": {...}, "tensors": ["name", ...]}
#   then per tensor, in listed order:
#       line: name
#       line: space-separated dims (empty line for a 0-d scalar)
#       line: space-separated entries in row-major order, printed with
#             repr-exact precision (%.17g), so float64 values round-trip
#             bit-for-bit.

def save_tensors(path, tensors, meta=None):
    """Write named float64 tensors plus a JSON metadata header."""
    names = list(tensors)
    with open(path, "w") as f:
        f.write(json.dumps({"meta": meta or {}, "tensors": names}) + "\n")
        for name in names:
            a = np.ascontiguousarray(tensors[name], dtype=DTYPE)
            f.write(name + "\n")
            f.write(" ".join(str(d) for d in a.shape) + "\n")
            f.write(" ".join("%.17g" % v for v in a.ravel()) + "\n")


def load_tensors(path):
    """Read a file written by :func:`save_tensors`; returns (tensors, meta)."""
    with open(path) as f:
        header = json.loads(f.readline())
        tensors = {}
        for name in header["tensors"]:
            read_name = f.readline().strip()
            if read_name != name:
                raise ValueError(f"corrupt tensor file: expected {name!r}, found {read_name!r}")
            dims_line = f.readline().strip()
            shape = tuple(int(d) for d in dims_line.split()) if dims_line else ()
            data = np.array([float(v) for v in f.readline().split()], dtype=DTYPE)
            if data.size != int(np.prod(shape, dtype=np.int64)):
                raise ValueError(f"corrupt tensor file: {name} payload size mismatch")
            tensors[name] = data.reshape(shape)
    return tensors, header["meta"]
