"""Recurrent transition-model family with a shared step/forward interface.

Six variants of the hidden-state update h^t = f(h^{t-1}, x^t):

* ``full_bilinear`` -- h' = A(x) h with A(x)[i,j] = sum_k W[i,j,k] x[k];
  the transition matrix is a linear image of the input.
* ``factored``      -- rank-R factorization of the same tensor, applied as
  Wh1 @ ((Wx.T x) * (Wh2.T h)) without materializing A(x).
* ``block_diag``    -- independent dense bilinear blocks ("heads") acting on
  disjoint hidden sub-spaces.
* ``r2_rotation``   -- each 2-D hidden plane is rotated by an input-dependent
  angle theta_p(x) = angles[p] . x; orthogonal and norm-preserving.
* ``real_diag``     -- elementwise h'_i = (diag[i] . x) h_i; equivalent to
  block_diag with block size 1.
* ``elman``         -- nonlinear baseline h' = tanh(A h + B x + b).

Optional additive terms (+ B x and/or + b) can be enabled for the linear
variants; with both disabled the update is purely multiplicative, which
makes hidden states scale-invariant: rescaling h0 by c > 0 rescales every
downstream state and logit by c and leaves all argmax decisions unchanged.
That is what licenses per-step L2 normalization at inference time.

Parameters live in a flat dict of float64 arrays.  The batched kernels
(`forward_batch` / `backward_batch`) carry a per-row activity mask so that
right-padded token rows of different lengths share one matrix program; a
padded step leaves the row's hidden state untouched and contributes no
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import (
    DTYPE,
    DimensionError,
    contract_tensor,
    load_tensors,
    make_rng,
    rotation_block_diag,
    save_tensors,
    uniform_init,
)

FULL_BILINEAR = "full_bilinear"
FACTORED = "factored"
BLOCK_DIAG = "block_diag"
R2_ROTATION = "r2_rotation"
REAL_DIAG = "real_diag"
ELMAN = "elman"
VARIANTS = (FULL_BILINEAR, FACTORED, BLOCK_DIAG, R2_ROTATION, REAL_DIAG, ELMAN)

# parameter names owned by each variant's transition core
CORE_PARAMS = {
    FULL_BILINEAR: ("W",),
    FACTORED: ("Wh1", "Wh2", "Wx"),
    BLOCK_DIAG: ("W",),
    R2_ROTATION: ("angles",),
    REAL_DIAG: ("diag",),
    ELMAN: ("A",),
}


class OverflowAbort(FloatingPointError):
    """Raised when a forward pass produces non-finite hidden states."""


@dataclass(frozen=True)
class AdditiveConfig:
    """Which additive terms of h^t = A h^{t-1} + B x^t + b are enabled.

    Both flags off is the pure multiplicative configuration; the update is
    then truly bilinear rather than affine.
    """

    input_dependent: bool = False
    constant_bias: bool = False
    init_half_width: float = 0.01

    @classmethod
    def none(cls):
        return cls(False, False)

    @property
    def label(self):
        if self.input_dependent and self.constant_bias:
            return "input_dep+const"
        if self.input_dependent:
            return "input_dep"
        if self.constant_bias:
            return "const"
        return "none"


ADDITIVE_SETTINGS = {
    "input_dep": AdditiveConfig(True, False),
    "input_dep+const": AdditiveConfig(True, True),
    "const": AdditiveConfig(False, True),
    "none": AdditiveConfig(False, False),
}


def _one_hot_rows(ids, width):
    out = np.zeros((ids.shape[0], width), dtype=DTYPE)
    out[np.arange(ids.shape[0]), ids] = 1.0
    return out


@dataclass
class Model:
    kind: str
    H: int
    D: int
    vocab_size: int
    n_classes: int
    additive: AdditiveConfig
    params: dict
    rank: int | None = None
    block_size: int | None = None
    # compiled-automaton convention: the token right after [BOS] overwrites
    # the hidden state with its one-hot encoding instead of being multiplied
    # in.  Inference-only; backward through this is rejected.
    first_token_sets_state: bool = False

    # -- construction -------------------------------------------------------

    @classmethod
    def build(
        cls,
        kind,
        H,
        D,
        vocab_size,
        n_classes,
        rng,
        rank=None,
        block_size=None,
        additive=None,
        init_half_width=0.01,
    ):
        """Fresh model with all parameters drawn uniform on [-w, w).

        The bilinear family uses w = ``init_half_width`` everywhere; the
        Elman baseline uses w = 1/sqrt(H) for its recurrent/input matrices
        (a tanh cell initialized at 0.01 barely propagates signal).
        Additive terms use the half-width from ``additive``.
        """
        if kind not in VARIANTS:
            raise ValueError(f"unknown variant {kind!r}")
        additive = additive or AdditiveConfig.none()
        rng = make_rng(rng)
        hw = init_half_width
        params = {}
        if kind == FULL_BILINEAR:
            params["W"] = uniform_init((H, H, D), hw, rng)
        elif kind == FACTORED:
            if not rank or rank < 1:
                raise ValueError("factored variant needs rank >= 1")
            params["Wh1"] = uniform_init((H, rank), hw, rng)
            params["Wh2"] = uniform_init((H, rank), hw, rng)
            params["Wx"] = uniform_init((D, rank), hw, rng)
        elif kind == BLOCK_DIAG:
            if not block_size or H % block_size != 0:
                raise ValueError(f"H={H} must be a multiple of block_size={block_size}")
            params["W"] = uniform_init((H // block_size, block_size, block_size, D), hw, rng)
        elif kind == R2_ROTATION:
            if H % 2 != 0:
                raise ValueError(f"r2_rotation needs even H, got {H}")
            params["angles"] = uniform_init((H // 2, D), hw, rng)
        elif kind == REAL_DIAG:
            params["diag"] = uniform_init((H, D), hw, rng)
        else:  # elman
            elman_hw = 1.0 / np.sqrt(H)
            params["A"] = uniform_init((H, H), elman_hw, rng)
            if not additive.input_dependent:
                additive = replace(additive, input_dependent=True)
        if additive.input_dependent:
            w = additive.init_half_width if kind != ELMAN else 1.0 / np.sqrt(H)
            params["B"] = uniform_init((H, D), w, rng)
        if additive.constant_bias:
            params["b"] = (
                np.zeros(H) if kind == ELMAN else uniform_init((H,), additive.init_half_width, rng)
            )
        params["embed"] = uniform_init((vocab_size, D), hw, rng)
        params["readout"] = uniform_init((n_classes, H), hw, rng)
        params["h0"] = uniform_init((H,), hw, rng)
        return cls(kind, H, D, vocab_size, n_classes, additive, params,
                   rank=rank, block_size=block_size)

    # -- bookkeeping --------------------------------------------------------

    @property
    def is_pure_multiplicative(self):
        """Linear variant with no additive terms: hidden states are scale-invariant."""
        return self.kind != ELMAN and not (
            self.additive.input_dependent or self.additive.constant_bias
        )

    def transition_param_names(self):
        return CORE_PARAMS[self.kind]

    def param_count(self):
        """Itemized parameter counts per group plus the total."""
        counts = {"transition": sum(self.params[k].size for k in CORE_PARAMS[self.kind])}
        for name in ("B", "b", "embed", "readout", "h0"):
            if name in self.params:
                counts[name] = self.params[name].size
        counts["total"] = sum(v for k, v in counts.items() if k != "total")
        return counts

    def variant_label(self):
        if self.kind == FACTORED:
            return f"{self.kind}(R={self.rank})"
        if self.kind == BLOCK_DIAG:
            return f"{self.kind}({self.block_size})"
        return self.kind

    # -- core step kernels (batched over rows) ------------------------------

    def _core_step(self, h, x):
        """One multiplicative transition on a (B, H) state block.

        Returns the new state and the cache needed by ``_core_backstep``.
        """
        p = self.params
        if self.kind == FULL_BILINEAR:
            H, D = self.H, self.D
            A = x.dot(p["W"].reshape(H * H, D).T).reshape(-1, H, H)
            h_new = np.matmul(A, h[:, :, None])[:, :, 0]
            return h_new, (h, x, A)
        if self.kind == FACTORED:
            u = x.dot(p["Wx"])
            v = h.dot(p["Wh2"])
            z = u * v
            return z.dot(p["Wh1"].T), (h, x, u, v, z)
        if self.kind == BLOCK_DIAG:
            nb, bs = p["W"].shape[0], p["W"].shape[1]
            hb = h.reshape(-1, nb, bs)
            A = x.dot(p["W"].reshape(nb * bs * bs, self.D).T).reshape(-1, nb, bs, bs)
            h_new = np.matmul(A, hb[..., None])[..., 0].reshape(-1, self.H)
            return h_new, (h, x, A)
        if self.kind == R2_ROTATION:
            theta = x.dot(p["angles"].T)
            c, s = np.cos(theta), np.sin(theta)
            he, ho = h[:, 0::2], h[:, 1::2]
            h_new = np.empty_like(h)
            h_new[:, 0::2] = c * he - s * ho
            h_new[:, 1::2] = s * he + c * ho
            return h_new, (h, x, c, s)
        if self.kind == REAL_DIAG:
            a = x.dot(p["diag"].T)
            return a * h, (h, x, a)
        # elman: additive terms sit inside the nonlinearity
        pre = h.dot(p["A"].T)
        if self.additive.input_dependent:
            pre = pre + x.dot(p["B"].T)
        if self.additive.constant_bias:
            pre = pre + p["b"]
        h_new = np.tanh(pre)
        return h_new, (h, x, h_new)

    def _core_backstep(self, cache, dhn, grads):
        """Reverse one transition.  ``dhn`` must already be activity-masked.

        Accumulates parameter gradients into ``grads`` and returns
        (dL/dh_prev, dL/dx) for this step.
        """
        p = self.params
        if self.kind == FULL_BILINEAR:
            h, x, A = cache
            H, D = self.H, self.D
            dA = dhn[:, :, None] * h[:, None, :]
            grads["W"] += dA.reshape(-1, H * H).T.dot(x).reshape(H, H, D)
            dh = np.matmul(A.transpose(0, 2, 1), dhn[:, :, None])[:, :, 0]
            dx = dA.reshape(-1, H * H).dot(p["W"].reshape(H * H, D))
            return dh, dx
        if self.kind == FACTORED:
            h, x, u, v, z = cache
            dz = dhn.dot(p["Wh1"])
            grads["Wh1"] += dhn.T.dot(z)
            du, dv = dz * v, dz * u
            grads["Wx"] += x.T.dot(du)
            grads["Wh2"] += h.T.dot(dv)
            return dv.dot(p["Wh2"].T), du.dot(p["Wx"].T)
        if self.kind == BLOCK_DIAG:
            h, x, A = cache
            nb, bs = p["W"].shape[0], p["W"].shape[1]
            hb = h.reshape(-1, nb, bs)
            dhnb = dhn.reshape(-1, nb, bs)
            dA = dhnb[..., None] * hb[:, :, None, :]
            grads["W"] += dA.reshape(-1, nb * bs * bs).T.dot(x).reshape(nb, bs, bs, self.D)
            dh = np.matmul(A.transpose(0, 1, 3, 2), dhnb[..., None])[..., 0].reshape(-1, self.H)
            dx = dA.reshape(-1, nb * bs * bs).dot(p["W"].reshape(nb * bs * bs, self.D))
            return dh, dx
        if self.kind == R2_ROTATION:
            h, x, c, s = cache
            he, ho = h[:, 0::2], h[:, 1::2]
            de, do = dhn[:, 0::2], dhn[:, 1::2]
            dtheta = de * (-s * he - c * ho) + do * (c * he - s * ho)
            grads["angles"] += dtheta.T.dot(x)
            dx = dtheta.dot(p["angles"])
            dh = np.empty_like(h)
            dh[:, 0::2] = c * de + s * do
            dh[:, 1::2] = -s * de + c * do
            return dh, dx
        if self.kind == REAL_DIAG:
            h, x, a = cache
            da = dhn * h
            grads["diag"] += da.T.dot(x)
            return a * dhn, da.dot(p["diag"])
        # elman
        h, x, h_new = cache
        dpre = dhn * (1.0 - h_new * h_new)
        grads["A"] += dpre.T.dot(h)
        dh = dpre.dot(p["A"])
        dx = np.zeros_like(x)
        if self.additive.input_dependent:
            grads["B"] += dpre.T.dot(x)
            dx = dpre.dot(p["B"])
        if self.additive.constant_bias:
            grads["b"] += dpre.sum(axis=0)
        return dh, dx

    # -- forward ------------------------------------------------------------

    def forward_batch(self, tokens, n_tokens, normalize=False, want_trace=False):
        """Run the recurrence over a padded (B, T) token matrix.

        Returns (logits (B, C), invalid (B,) bool, trace or None).  A row is
        invalid when its hidden state went non-finite, or hit exact zero
        norm while normalizing; its logits are meaningless and callers score
        it as wrong.  ``normalize`` rescales the state to unit norm after
        every active step (inference-time path).
        """
        p = self.params
        B, T = tokens.shape
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise DimensionError("token id out of vocabulary range")
        if want_trace and self.first_token_sets_state:
            raise ValueError("compiled first-token convention is not differentiable")
        if want_trace and normalize:
            raise ValueError("normalization is an inference-only path; traces assume the raw recurrence")
        h = np.broadcast_to(p["h0"], (B, self.H)).copy()
        invalid = np.zeros(B, dtype=bool)
        trace = [] if want_trace else None
        for t in range(T):
            active = t < n_tokens
            x = p["embed"][tokens[:, t]]
            if self.first_token_sets_state and t == 1:
                if tokens[:, 1].max() >= self.H:
                    raise DimensionError("initial-state token exceeds hidden width")
                h = np.where(active[:, None], _one_hot_rows(tokens[:, 1], self.H), h)
                continue
            h_new, cache = self._core_step(h, x)
            if self.kind != ELMAN:
                if self.additive.input_dependent:
                    h_new = h_new + x.dot(p["B"].T)
                if self.additive.constant_bias:
                    h_new = h_new + p["b"]
            if normalize:
                norms = np.linalg.norm(h_new, axis=1)
                bad = ~np.isfinite(norms) | (norms == 0.0)
                invalid |= bad & active
                norms[bad] = 1.0
                h_new = h_new / norms[:, None]
            h = np.where(active[:, None], h_new, h)
            if want_trace:
                trace.append(cache)
        bad_final = ~np.isfinite(h).all(axis=1)
        invalid |= bad_final
        logits = h.dot(p["readout"].T)
        if want_trace:
            return logits, invalid, Trace(tokens, n_tokens, trace, h)
        return logits, invalid, None

    def forward(self, tokens, normalize=False, want_trace=False):
        """Single-sequence forward; raises OverflowAbort on a degenerate state."""
        tokens = np.asarray(tokens, dtype=np.int64)[None, :]
        n_tokens = np.array([tokens.shape[1]], dtype=np.int64)
        logits, invalid, trace = self.forward_batch(
            tokens, n_tokens, normalize=normalize, want_trace=want_trace
        )
        if invalid[0]:
            raise OverflowAbort("non-finite or zero-norm hidden state in forward pass")
        return (logits[0], trace) if want_trace else (logits[0], None)

    def step(self, h, token_id):
        """One transition from state ``h`` on one token (additive terms included)."""
        h = np.asarray(h, dtype=DTYPE)
        if h.shape != (self.H,):
            raise DimensionError(f"step: h has shape {h.shape}, expected ({self.H},)")
        x = self.params["embed"][int(token_id)]
        h_new, cache = self._core_step(h[None, :], x[None, :])
        if self.kind != ELMAN:
            if self.additive.input_dependent:
                h_new = h_new + x[None, :].dot(self.params["B"].T)
            if self.additive.constant_bias:
                h_new = h_new + self.params["b"]
        if not np.all(np.isfinite(h_new)):
            raise OverflowAbort("non-finite hidden state after step")
        return h_new[0], cache

    def predict(self, tokens, normalize=False):
        """Class prediction: argmax of the readout at [EOI]; ties break low."""
        logits, _ = self.forward(tokens, normalize=normalize)
        return int(np.argmax(logits))

    def predict_batch(self, batch, normalize=False):
        """Predictions for a TokenBatch; invalid rows come back as -1."""
        logits, invalid, _ = self.forward_batch(
            batch.tokens, batch.n_tokens, normalize=normalize
        )
        pred = np.argmax(logits, axis=1)
        pred[invalid] = -1
        return pred

    # -- backward -----------------------------------------------------------

    def backward_batch(self, trace, dlogits):
        """Exact reverse-mode gradients of the scalar loss whose logit
        gradient is ``dlogits`` (already summed/averaged over the batch).

        Returns a dict shaped exactly like ``self.params``.
        """
        p = self.params
        tokens, n_tokens, caches, h_final = trace.tokens, trace.n_tokens, trace.caches, trace.h_final
        if len(caches) != tokens.shape[1]:
            raise ValueError("trace does not match its token matrix")
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        grads["readout"] += dlogits.T.dot(h_final)
        dh = dlogits.dot(p["readout"])
        for t in range(tokens.shape[1] - 1, -1, -1):
            active = (t < n_tokens).astype(DTYPE)[:, None]
            dhn = dh * active
            x = caches[t][1]
            dx = np.zeros_like(x)
            if self.kind != ELMAN:
                if self.additive.constant_bias:
                    grads["b"] += dhn.sum(axis=0)
                if self.additive.input_dependent:
                    grads["B"] += dhn.T.dot(x)
                    dx += dhn.dot(p["B"])
            dh_core, dx_core = self._core_backstep(caches[t], dhn, grads)
            dx += dx_core
            np.add.at(grads["embed"], tokens[:, t], dx)
            dh = dh_core + dh * (1.0 - active)
        grads["h0"] += dh.sum(axis=0)
        return grads

    # -- analysis helpers ----------------------------------------------------

    def transition_matrix(self, x):
        """Materialize the input-conditioned transition matrix A(x).

        Only the multiplicative part; additive terms are not part of A.
        Undefined for the nonlinear Elman cell.
        """
        x = np.asarray(x, dtype=DTYPE)
        p = self.params
        if self.kind == FULL_BILINEAR:
            return contract_tensor(p["W"], x)
        if self.kind == FACTORED:
            u = p["Wx"].T.dot(x)
            return (p["Wh1"] * u).dot(p["Wh2"].T)
        if self.kind == BLOCK_DIAG:
            nb, bs = p["W"].shape[0], p["W"].shape[1]
            A = np.zeros((self.H, self.H))
            for b in range(nb):
                A[b * bs : (b + 1) * bs, b * bs : (b + 1) * bs] = contract_tensor(p["W"][b], x)
            return A
        if self.kind == R2_ROTATION:
            return rotation_block_diag(p["angles"].dot(x))
        if self.kind == REAL_DIAG:
            return np.diag(p["diag"].dot(x))
        raise ValueError("elman has no input-conditioned linear transition matrix")

    def transition_matrix_for_token(self, token_id):
        return self.transition_matrix(self.params["embed"][int(token_id)])

    # -- checkpointing -------------------------------------------------------

    def save(self, path):
        meta = {
            "kind": self.kind,
            "H": self.H,
            "D": self.D,
            "vocab_size": self.vocab_size,
            "n_classes": self.n_classes,
            "rank": self.rank,
            "block_size": self.block_size,
            "additive": {
                "input_dependent": self.additive.input_dependent,
                "constant_bias": self.additive.constant_bias,
                "init_half_width": self.additive.init_half_width,
            },
            "first_token_sets_state": self.first_token_sets_state,
        }
        save_tensors(path, self.params, meta=meta)

    @classmethod
    def load(cls, path):
        params, meta = load_tensors(path)
        add = AdditiveConfig(
            meta["additive"]["input_dependent"],
            meta["additive"]["constant_bias"],
            meta["additive"]["init_half_width"],
        )
        return cls(
            meta["kind"],
            meta["H"],
            meta["D"],
            meta["vocab_size"],
            meta["n_classes"],
            add,
            params,
            rank=meta["rank"],
            block_size=meta["block_size"],
            first_token_sets_state=meta["first_token_sets_state"],
        )


@dataclass
class Trace:
    """Per-step quantities cached by a training-mode forward pass."""

    tokens: np.ndarray
    n_tokens: np.ndarray
    caches: list
    h_final: np.ndarray
