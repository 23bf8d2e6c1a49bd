"""Exact analytic model constructions, independent of any training.

Three constructive results about the transition-model family:

1. ``compile_fsm``: any finite automaton is simulated exactly by a full
   bilinear model whose tensor slice for symbol s is the 0/1 successor
   matrix of s (one-hot states stay one-hot, so the simulation is exact in
   integer arithmetic, not just to tolerance).
2. ``compile_mod_add``: addition modulo m is simulated exactly by a single
   2-D rotation plane whose angle for symbol s is 2*pi*s/m, with readout
   row k equal to the initial state rotated by 2*pi*k/m.
3. ``frozen_parity``: a random *frozen* real-diagonal model plus a readout
   fitted on two examples computes parity of arbitrary-length bit strings
   whenever some component i has transition signs a0_i > 0, a1_i < 0.
   Such a component exists with probability 1 - (3/4)^H; a merely
   opposite-signed component (probability 1 - 2^{-H}) encodes parity only
   up to a sequence-length-dependent sign flip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import DTYPE, l2_normalize, make_rng, split_rng
from .models import (
    FULL_BILINEAR,
    R2_ROTATION,
    REAL_DIAG,
    AdditiveConfig,
    Model,
)
from . import tasks, training
from .tasks import Fsm, TaskSpec, Vocab

# m=3 automaton whose symbol-transition matrices include a non-commuting
# pair (columns 0 and 1 act on the state set as the transpositions (01)
# and (12)); rows are permutations as required.
NONCOMMUTING_FSM_M3 = Fsm(3, ((1, 0, 2), (0, 2, 1), (2, 1, 0)))


def _identity_embed(vocab_size):
    return np.eye(vocab_size, dtype=DTYPE)


def compile_fsm(fsm):
    """Full bilinear model that simulates ``fsm`` exactly.

    One-hot input embeddings; tensor slice for symbol s is the successor
    matrix D_s; [BOS]/[EOI] slices are the identity; readout is the
    identity (class i reads hidden unit i).  The first token after [BOS]
    sets the hidden state to its one-hot encoding, matching the task
    convention that the first input symbol is the initial state.
    """
    m = fsm.m
    vocab = Vocab(tasks.STATE_MACHINE, m)
    V = len(vocab)
    W = np.zeros((m, m, V), dtype=DTYPE)
    for s in range(m):
        W[:, :, s] = fsm.transition_matrix(s)
    W[:, :, vocab.bos_id] = np.eye(m)
    W[:, :, vocab.eoi_id] = np.eye(m)
    params = {
        "W": W,
        "embed": _identity_embed(V),
        "readout": np.eye(m, dtype=DTYPE),
        "h0": np.full(m, 1.0 / m, dtype=DTYPE),
    }
    return Model(
        FULL_BILINEAR,
        H=m,
        D=V,
        vocab_size=V,
        n_classes=m,
        additive=AdditiveConfig.none(),
        params=params,
        first_token_sets_state=True,
    )


def compile_mod_add(m):
    """Rotation-plane model that sums symbols modulo m exactly.

    Symbol s rotates the 2-D hidden state by 2*pi*s/m ([BOS]/[EOI] rotate
    by zero); rotations about a common axis add angles, so after any
    sequence the state is h0 rotated by 2*pi/m times the sum mod m, and
    readout row k = R(2*pi*k/m) h0 attains its maximum dot product exactly
    at the class equal to that sum.
    """
    if m < 2:
        raise ValueError("compile_mod_add: need m >= 2")
    vocab = Vocab(tasks.MOD_ADD, m)
    V = len(vocab)
    angles = np.zeros((1, V), dtype=DTYPE)
    angles[0, :m] = 2.0 * np.pi * np.arange(m) / m
    ks = 2.0 * np.pi * np.arange(m) / m
    readout = np.stack([np.cos(ks), np.sin(ks)], axis=1)
    params = {
        "angles": angles,
        "embed": _identity_embed(V),
        "readout": readout,
        "h0": np.array([1.0, 0.0]),
    }
    return Model(
        R2_ROTATION,
        H=2,
        D=V,
        vocab_size=V,
        n_classes=m,
        additive=AdditiveConfig.none(),
        params=params,
    )


# ---------------------------------------------------------------------------
# Frozen-network parity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParityDiagnostics:
    """Sign pattern of a frozen real-diagonal draw.

    ``sign_pattern[i]`` holds (sign a0_i, sign a1_i).  A component with
    opposite signs makes the sign of h_i carry parity information; the
    ideal orientation (a0_i > 0, a1_i < 0) carries it identically for
    every sequence length.
    """

    H: int
    sign_pattern: tuple
    has_opposite_sign: bool
    has_ideal: bool
    ideal_index: int | None
    opposite_index: int | None


def parity_diagnostics(a0, a1):
    signs = tuple((int(np.sign(x0)), int(np.sign(x1))) for x0, x1 in zip(a0, a1))
    opposite = [i for i, (s0, s1) in enumerate(signs) if s0 * s1 < 0]
    ideal = [i for i, (s0, s1) in enumerate(signs) if s0 > 0 and s1 < 0]
    return ParityDiagnostics(
        H=len(signs),
        sign_pattern=signs,
        has_opposite_sign=bool(opposite),
        has_ideal=bool(ideal),
        ideal_index=ideal[0] if ideal else None,
        opposite_index=opposite[0] if opposite else None,
    )


def draw_frozen_parity_model(H, rng):
    """Random frozen real-diagonal parity model plus its sign diagnostics.

    Diagonal transition weights for tokens 0 and 1 are i.i.d. uniform on
    [-1, 1] (symmetric about zero, the only property the analysis needs);
    [BOS]/[EOI] act as the identity.  h0 is all ones (fixed positive sign)
    and the readout starts at zero, to be fitted afterwards.
    """
    rng = make_rng(rng)
    vocab = Vocab(tasks.PARITY, 2)
    V = len(vocab)
    diag = np.ones((H, V), dtype=DTYPE)
    diag[:, 0] = rng.uniform(-1.0, 1.0, size=H)
    diag[:, 1] = rng.uniform(-1.0, 1.0, size=H)
    params = {
        "diag": diag,
        "embed": _identity_embed(V),
        "readout": np.zeros((2, H), dtype=DTYPE),
        "h0": np.ones(H, dtype=DTYPE),
    }
    model = Model(
        REAL_DIAG,
        H=H,
        D=V,
        vocab_size=V,
        n_classes=2,
        additive=AdditiveConfig.none(),
        params=params,
    )
    return model, parity_diagnostics(diag[:, 0], diag[:, 1])


def _final_state(model, tokens, normalize=True):
    h = model.params["h0"].copy()
    for tok in tokens:
        h, _ = model.step(h, tok)
        if normalize:
            h = l2_normalize(h)
    return h


@dataclass
class FrozenParityResult:
    model: Model
    diagnostics: ParityDiagnostics
    success: bool
    probe_accuracy: dict
    component: int | None
    method: str


def frozen_parity(
    H,
    seed,
    train_set=None,
    method="closed_form",
    probe_lengths=(10, 50, 100),
    probe_n=256,
    train_max_len=50,
):
    """Fit only the readout of a frozen random diagonal model on 2 examples.

    ``closed_form`` places the readout on the best sign-carrying component
    (ideal if one exists, else any opposite-signed one), oriented by the
    two training examples; ``gradient`` instead runs a short Adam fit of
    the readout on the same two examples.  ``success`` requires perfect
    accuracy on every probe length.  A draw with no opposite-signed
    component is reported as success=False with its diagnostics.
    """
    rng = make_rng(seed)
    draw_rng, data_rng, probe_rng = split_rng(rng, 3)
    model, diag = draw_frozen_parity_model(H, draw_rng)
    spec = TaskSpec(tasks.PARITY, 2, max_len=train_max_len)
    if train_set is None:
        train_set = tasks.fixed_dataset(spec, 2, data_rng)
    if {s.target for s in train_set} != {0, 1}:
        raise ValueError("frozen_parity: need one even and one odd training example")

    component = diag.ideal_index if diag.ideal_index is not None else diag.opposite_index
    if component is None:
        return FrozenParityResult(model, diag, False, {}, None, method)

    even = next(s for s in train_set if s.target == 0)
    odd = next(s for s in train_set if s.target == 1)
    if method == "closed_form":
        h_even = _final_state(model, even.tokens)
        h_odd = _final_state(model, odd.tokens)
        orient = np.sign(h_even[component] - h_odd[component])
        if orient == 0.0:
            return FrozenParityResult(model, diag, False, {}, component, method)
        readout = np.zeros((2, H), dtype=DTYPE)
        readout[0, component] = orient
        readout[1, component] = -orient
        model.params["readout"] = readout
    elif method == "gradient":
        batch = tasks.batch_from_samples(train_set, Vocab(tasks.PARITY, 2))
        frozen = ("diag", "embed", "h0")
        state = training.AdamState.for_params(model.params, lr=0.05)
        for _ in range(400):
            _, _, grads = training.batch_loss(model, batch, want_grads=True)
            training.adam_step(model.params, grads, state, frozen=frozen)
    else:
        raise ValueError(f"unknown method {method!r}")

    probe_seeds = split_rng(probe_rng, len(probe_lengths))
    probe_acc = {}
    for length, prng in zip(probe_lengths, probe_seeds):
        res = training.evaluate(model, spec, length, probe_n, prng, normalize=True)
        probe_acc[length] = res.raw_acc
    success = all(a == 1.0 for a in probe_acc.values())
    return FrozenParityResult(model, diag, success, probe_acc, component, method)


# ---------------------------------------------------------------------------
# Commutativity checking
# ---------------------------------------------------------------------------


@dataclass
class CommutativityReport:
    variant: str
    commuting_by_construction: bool
    pair_norms: list
    max_norm: float


def verify_commutativity(model, token_pairs, tol=1e-12):
    """Sup-norm of [A_x, A_y] for sampled token pairs.

    Diagonal and rotation-plane transitions commute by construction; for
    those variants any commutator above ``tol`` raises.  For other linear
    variants the (generally nonzero) norms are simply reported.
    """
    commuting = model.kind in (REAL_DIAG, R2_ROTATION)
    norms = []
    for ta, tb in token_pairs:
        Ax = model.transition_matrix_for_token(ta)
        Ay = model.transition_matrix_for_token(tb)
        norms.append(float(np.abs(Ax.dot(Ay) - Ay.dot(Ax)).max()))
    report = CommutativityReport(model.kind, commuting, norms, max(norms) if norms else 0.0)
    if commuting and report.max_norm >= tol:
        raise ValueError(
            f"commutativity violated for {model.kind}: max commutator {report.max_norm:.3e}"
        )
    return report
